use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    ModelConfig, RegressorTap, DECODER_KERNELS, DECODER_STRIDES, ENCODER_KERNEL, ENCODER_PAD, ENCODER_STRIDE,
    REGRESSOR_HIDDEN,
};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::image::{Image, SIZE};
use crate::nn::{
    dropout, dropout_backward, leaky_relu, leaky_relu_backward, orthogonal, sigmoid, BatchNorm2d, BatchNormCache,
    Conv2d, ConvTranspose2d, Linear, Param, Scalar, Tensor,
};

/// Evaluation disables dropout, uses batch-norm running statistics and sets
/// `z = mu`. Training draws dropout masks and `ε` from the given generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Which part of the architecture a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder(Domain),
    Decoder(Domain),
    Shared,
    Regressor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<T> {
    pub encoder: [Conv2d<T>; 4],
    pub decoder: [ConvTranspose2d<T>; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedCore<T> {
    pub conv: Conv2d<T>,
    pub hidden: Linear<T>,
    pub mu: Linear<T>,
    pub logvar: Linear<T>,
    pub expand: Linear<T>,
    pub deconv: ConvTranspose2d<T>,
    pub norm: BatchNorm2d<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor<T> {
    pub hidden: [Linear<T>; 2],
    pub out: Linear<T>,
}

/// All tensors of the twin architecture. The shared core and the regressor
/// exist once; both branches route through them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub nat: Branch<T>,
    pub syn: Branch<T>,
    pub shared: SharedCore<T>,
    pub regressor: Regressor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
    pub z: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub reconstruction: Image,
    pub latent: LatentCode,
    /// Regressor output clamped at zero.
    pub count_estimate: f32,
}

/// Post-activation output of a layer with its dropout mask.
#[derive(Debug, Clone)]
struct Block<T> {
    act: Tensor<T>,
    mask: Option<Vec<T>>,
    out: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    fn new(mut pre: Tensor<T>, slope: T, rate: f64, mode: &mut Mode<'_>) -> Self {
        leaky_relu(&mut pre.data, slope);
        match mode {
            Mode::Train(rng) if rate > 0.0 => {
                let mut out = pre.clone();
                let mask = dropout(&mut out.data, rate, &mut **rng);
                Block {
                    act: pre,
                    mask: Some(mask),
                    out,
                }
            }
            _ => Block {
                out: pre.clone(),
                act: pre,
                mask: None,
            },
        }
    }

    /// Gradient w.r.t. the pre-activation, given the gradient of `out`.
    fn backward(&self, mut grad: Tensor<T>, slope: T) -> Tensor<T> {
        if let Some(mask) = &self.mask {
            dropout_backward(mask, &mut grad.data);
        }
        leaky_relu_backward(&self.act.data, &mut grad.data, slope);
        grad
    }
}

#[derive(Debug, Clone)]
struct EncoderTrace<T> {
    input: Tensor<T>,
    convs: Vec<Block<T>>,
    hidden: Block<T>,
    mu: Tensor<T>,
    logvar: Tensor<T>,
}

#[derive(Debug, Clone)]
struct DecoderTrace<T> {
    z: Tensor<T>,
    expand: Block<T>,
    norm: Option<BatchNormCache<T>>,
    shared_act: Tensor<T>,
    layers: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
struct RegressorTrace<T> {
    input: Tensor<T>,
    hidden: Vec<Block<T>>,
    out: Tensor<T>,
}

/// Everything a training-mode forward pass produced, kept for the backward
/// pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub domain: Domain,
    enc: EncoderTrace<T>,
    eps: Option<Vec<T>>,
    dec: DecoderTrace<T>,
    reg: RegressorTrace<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn batch_size(&self) -> usize {
        self.enc.input.n
    }

    /// Reconstructions, `n × 1 × 128 × 128`.
    pub fn reconstruction(&self) -> &Tensor<T> {
        self.dec.layers.last().expect("decoder ran")
    }

    pub fn mu(&self) -> &Tensor<T> {
        &self.enc.mu
    }

    pub fn logvar(&self) -> &Tensor<T> {
        &self.enc.logvar
    }

    pub fn z(&self) -> &Tensor<T> {
        &self.dec.z
    }

    /// Unclamped regressor outputs, one per sample.
    pub fn counts(&self) -> &[T] {
        &self.reg.out.data
    }

    pub fn inputs(&self) -> &Tensor<T> {
        &self.enc.input
    }

    /// Sign of every leaky-rectified activation. Two passes with equal
    /// patterns lie on the same smooth piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let blocks = self
            .enc
            .convs
            .iter()
            .chain([&self.enc.hidden, &self.dec.expand])
            .chain(&self.reg.hidden)
            .map(|b| &b.act);
        let layers = self.dec.layers.split_last().map_or(&[][..], |(_, rest)| rest);
        blocks
            .chain(std::iter::once(&self.dec.shared_act))
            .chain(layers)
            .flat_map(|t| t.data.iter().map(|v| v.as_f64() > 0.0))
            .collect()
    }

    /// Spatial sizes of the encoder feature maps, input first.
    pub fn encoder_sizes(&self) -> Vec<usize> {
        std::iter::once(self.enc.input.h)
            .chain(self.enc.convs.iter().map(|b| b.out.h))
            .collect()
    }

    /// Spatial sizes along the decoder, from the reshaped code to the output.
    pub fn decoder_sizes(&self) -> Vec<usize> {
        [1, self.dec.shared_act.h]
            .into_iter()
            .chain(self.dec.layers.iter().map(|t| t.h))
            .collect()
    }
}

/// Loss gradients w.r.t. the model outputs. `None` means the corresponding
/// term does not contribute (its subnetwork receives no gradient).
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<T> {
    pub reconstruction: Option<Tensor<T>>,
    pub count: Option<Vec<T>>,
    pub mu: Option<Vec<T>>,
    pub logvar: Option<Vec<T>>,
}

/// Batched forward result in `f32`, one entry per sample.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub reconstructions: Vec<Image>,
    pub mu: Vec<Vec<f32>>,
    pub logvar: Vec<Vec<f32>>,
    pub z: Vec<Vec<f32>>,
    pub counts: Vec<f32>,
}

/// `z = mu + exp(logvar/2)·ε` with `ε ~ N(0, I)` in training; `z = mu` (and
/// no `ε`) in evaluation.
pub fn reparameterize<T: Scalar>(mu: &[T], logvar: &[T], mode: &mut Mode<'_>) -> (Vec<T>, Option<Vec<T>>) {
    assert_eq!(mu.len(), logvar.len());
    match mode {
        Mode::Eval => (mu.to_vec(), None),
        Mode::Train(rng) => {
            let eps: Vec<T> = (0..mu.len()).map(|_| T::of(rng.sample(StandardNormal))).collect();
            (reparameterize_with(mu, logvar, &eps), Some(eps))
        }
    }
}

pub(crate) fn reparameterize_with<T: Scalar>(mu: &[T], logvar: &[T], eps: &[T]) -> Vec<T> {
    let half = T::of(0.5);
    mu.iter()
        .zip(logvar)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
        .collect()
}

fn branch_new<T: Scalar>(domain: Domain, config: &ModelConfig) -> Branch<T> {
    let enc = config.encoder_channels();
    let dec = config.decoder_channels();
    let enc_in = [1, enc[0], enc[1], enc[2]];
    let dec_in = [config.shared_decoder_channels(), dec[0], dec[1], dec[2], dec[3]];
    let encoder = std::array::from_fn(|i| {
        Conv2d::new(
            &format!("{domain}.encoder.{i}"),
            enc_in[i],
            enc[i],
            ENCODER_KERNEL,
            ENCODER_STRIDE,
            ENCODER_PAD,
        )
    });
    let decoder = std::array::from_fn(|i| {
        ConvTranspose2d::new(
            &format!("{domain}.decoder.{i}"),
            dec_in[i],
            dec[i],
            DECODER_KERNELS[i],
            DECODER_STRIDES[i],
            0,
        )
    });
    Branch { encoder, decoder }
}

fn images_to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * SIZE * SIZE);
    for img in images {
        img.ensure_working_size()?;
        data.extend(img.pixels().iter().map(|&p| T::of(p as f64)));
    }
    Ok(Tensor::from_vec(images.len(), 1, SIZE, SIZE, data))
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.as_f64() as f32).collect()
}

impl<T: Scalar> ModelParams<T> {
    /// Architecture with all tensors zeroed (batch-norm scale set to one).
    pub fn zeroed(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let enc = config.encoder_channels();
        let width = config.shared_width();
        let latent = config.latent_dim;
        let shared = SharedCore {
            conv: Conv2d::new("shared.conv", enc[3], width, ENCODER_KERNEL, ENCODER_STRIDE, ENCODER_PAD),
            hidden: Linear::new("shared.hidden", width * 16, width),
            mu: Linear::new("shared.mu", width, latent),
            logvar: Linear::new("shared.logvar", width, latent),
            expand: Linear::new("shared.expand", latent, width),
            deconv: ConvTranspose2d::new(
                "shared.deconv",
                width,
                config.shared_decoder_channels(),
                ENCODER_KERNEL,
                ENCODER_STRIDE,
                0,
            ),
            norm: BatchNorm2d::new("shared.norm", config.shared_decoder_channels()),
        };
        let [h0, h1] = REGRESSOR_HIDDEN;
        let regressor = Regressor {
            hidden: [
                Linear::new("regressor.0", config.regressor_input(), h0),
                Linear::new("regressor.1", h0, h1),
            ],
            out: Linear::new("regressor.out", h1, 1),
        };
        Ok(ModelParams {
            config: config.clone(),
            nat: branch_new(Domain::Nat, config),
            syn: branch_new(Domain::Syn, config),
            shared,
            regressor,
        })
    }

    /// Orthogonal weights, zero biases; deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in model.params_mut() {
            if p.trainable && p.name.ends_with(".weight") {
                orthogonal(p, 1.0, &mut rng);
            }
        }
        Ok(model)
    }

    pub fn branch(&self, domain: Domain) -> &Branch<T> {
        match domain {
            Domain::Nat => &self.nat,
            Domain::Syn => &self.syn,
        }
    }

    /// Every tensor in a fixed order, tagged with its group.
    pub fn params(&self) -> Vec<(ParamGroup, &Param<T>)> {
        let mut out = Vec::new();
        for (domain, b) in [(Domain::Nat, &self.nat), (Domain::Syn, &self.syn)] {
            for c in &b.encoder {
                out.push((ParamGroup::Encoder(domain), &c.weight));
                out.push((ParamGroup::Encoder(domain), &c.bias));
            }
            for c in &b.decoder {
                out.push((ParamGroup::Decoder(domain), &c.weight));
                out.push((ParamGroup::Decoder(domain), &c.bias));
            }
        }
        let s = &self.shared;
        for p in [
            &s.conv.weight,
            &s.conv.bias,
            &s.hidden.weight,
            &s.hidden.bias,
            &s.mu.weight,
            &s.mu.bias,
            &s.logvar.weight,
            &s.logvar.bias,
            &s.expand.weight,
            &s.expand.bias,
            &s.deconv.weight,
            &s.deconv.bias,
            &s.norm.gamma,
            &s.norm.beta,
            &s.norm.running_mean,
            &s.norm.running_var,
        ] {
            out.push((ParamGroup::Shared, p));
        }
        let r = &self.regressor;
        for l in r.hidden.iter().chain(std::iter::once(&r.out)) {
            out.push((ParamGroup::Regressor, &l.weight));
            out.push((ParamGroup::Regressor, &l.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Param<T>)> {
        let mut out = Vec::new();
        for (domain, b) in [(Domain::Nat, &mut self.nat), (Domain::Syn, &mut self.syn)] {
            for c in &mut b.encoder {
                out.push((ParamGroup::Encoder(domain), &mut c.weight));
                out.push((ParamGroup::Encoder(domain), &mut c.bias));
            }
            for c in &mut b.decoder {
                out.push((ParamGroup::Decoder(domain), &mut c.weight));
                out.push((ParamGroup::Decoder(domain), &mut c.bias));
            }
        }
        let s = &mut self.shared;
        for p in [
            &mut s.conv.weight,
            &mut s.conv.bias,
            &mut s.hidden.weight,
            &mut s.hidden.bias,
            &mut s.mu.weight,
            &mut s.mu.bias,
            &mut s.logvar.weight,
            &mut s.logvar.bias,
            &mut s.expand.weight,
            &mut s.expand.bias,
            &mut s.deconv.weight,
            &mut s.deconv.bias,
            &mut s.norm.gamma,
            &mut s.norm.beta,
            &mut s.norm.running_mean,
            &mut s.norm.running_var,
        ] {
            out.push((ParamGroup::Shared, p));
        }
        let r = &mut self.regressor;
        let Regressor { hidden, out: last } = r;
        for l in hidden.iter_mut().chain(std::iter::once(last)) {
            out.push((ParamGroup::Regressor, &mut l.weight));
            out.push((ParamGroup::Regressor, &mut l.bias));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeroed(&self.config).expect("config already validated");
        for ((_, dst), (_, src)) in out.params_mut().into_iter().zip(self.params()) {
            *dst = src.cast();
        }
        out
    }

    fn slope(&self) -> T {
        T::of(self.config.leaky_slope)
    }

    fn run_encoder(&self, input: Tensor<T>, domain: Domain, mode: &mut Mode<'_>) -> EncoderTrace<T> {
        let slope = self.slope();
        let rate = self.config.dropout_rate;
        let mut convs: Vec<Block<T>> = Vec::with_capacity(5);
        for conv in self.branch(domain).encoder.iter().chain(std::iter::once(&self.shared.conv)) {
            let x = convs.last().map(|b| &b.out).unwrap_or(&input);
            let pre = conv.forward(x);
            convs.push(Block::new(pre, slope, rate, mode));
        }
        let flat = &convs.last().expect("five convolutions").out;
        let hidden = Block::new(self.shared.hidden.forward(flat), slope, rate, mode);
        let mu = self.shared.mu.forward(&hidden.out);
        let logvar = self.shared.logvar.forward(&hidden.out);
        EncoderTrace {
            input,
            convs,
            hidden,
            mu,
            logvar,
        }
    }

    fn run_decoder(&self, z: Tensor<T>, domain: Domain, mode: &mut Mode<'_>) -> DecoderTrace<T> {
        let slope = self.slope();
        let expand = Block::new(self.shared.expand.forward(&z), slope, self.config.dropout_rate, mode);
        let code = expand.out.clone().reshape(self.config.shared_width(), 1, 1);
        let pre = self.shared.deconv.forward(&code);
        let (mut shared_act, norm) = if mode.is_train() {
            let (y, cache) = self.shared.norm.forward_train(&pre);
            (y, Some(cache))
        } else {
            (self.shared.norm.forward_eval(&pre), None)
        };
        leaky_relu(&mut shared_act.data, slope);
        let decoder = &self.branch(domain).decoder;
        let mut layers: Vec<Tensor<T>> = Vec::with_capacity(decoder.len());
        for (i, layer) in decoder.iter().enumerate() {
            let x = layers.last().unwrap_or(&shared_act);
            let mut y = layer.forward(x);
            if i + 1 < decoder.len() {
                leaky_relu(&mut y.data, slope);
            } else {
                sigmoid(&mut y.data);
            }
            layers.push(y);
        }
        DecoderTrace {
            z,
            expand,
            norm,
            shared_act,
            layers,
        }
    }

    fn regressor_input(&self, z: &Tensor<T>, mu: &Tensor<T>, shared_act: &Tensor<T>) -> Tensor<T> {
        match self.config.regressor_tap {
            RegressorTap::Latent => z.clone(),
            RegressorTap::LatentMean => Tensor::dense(mu.n, mu.features(), mu.data.clone()),
            RegressorTap::SharedDecoder => {
                let p = shared_act.h * shared_act.w;
                let inv = T::of(1.0 / p as f64);
                let mut data = Vec::with_capacity(shared_act.n * shared_act.c);
                for i in 0..shared_act.n {
                    let s = shared_act.sample(i);
                    for ch in 0..shared_act.c {
                        data.push(s[ch * p..(ch + 1) * p].iter().copied().sum::<T>() * inv);
                    }
                }
                Tensor::dense(shared_act.n, shared_act.c, data)
            }
        }
    }

    fn run_regressor(&self, input: Tensor<T>, mode: &mut Mode<'_>) -> RegressorTrace<T> {
        let slope = self.slope();
        let mut hidden: Vec<Block<T>> = Vec::with_capacity(2);
        for layer in &self.regressor.hidden {
            let x = hidden.last().map(|b| &b.out).unwrap_or(&input);
            let pre = layer.forward(x);
            hidden.push(Block::new(pre, slope, self.config.dropout_rate, mode));
        }
        let out = self.regressor.out.forward(&hidden[1].out);
        RegressorTrace { input, hidden, out }
    }

    /// Full forward pass over a batch: encode, reparameterize, then decode
    /// with the same domain's decoder and regress the count.
    pub fn forward_batch(&self, input: Tensor<T>, domain: Domain, mode: &mut Mode<'_>) -> Trace<T> {
        let enc = self.run_encoder(input, domain, mode);
        let (z, eps) = reparameterize(&enc.mu.data, &enc.logvar.data, mode);
        let z = Tensor::dense(enc.mu.n, self.config.latent_dim, z);
        let dec = self.run_decoder(z, domain, mode);
        let reg_in = self.regressor_input(&dec.z, &enc.mu, &dec.shared_act);
        let reg = self.run_regressor(reg_in, mode);
        Trace {
            domain,
            enc,
            eps,
            dec,
            reg,
        }
    }

    pub fn forward_images(&self, images: &[&Image], domain: Domain, mode: &mut Mode<'_>) -> Result<Trace<T>> {
        Ok(self.forward_batch(images_to_tensor(images)?, domain, mode))
    }

    /// Backpropagates `grads` through the graph recorded in `trace`,
    /// accumulating into the parameter gradients.
    pub fn backward(&mut self, trace: &Trace<T>, grads: &OutputGrads<T>) {
        let slope = self.slope();
        let n = trace.batch_size();
        let latent = self.config.latent_dim;
        let tap = self.config.regressor_tap;
        let ModelParams {
            nat,
            syn,
            shared,
            regressor,
            ..
        } = self;
        let branch = match trace.domain {
            Domain::Nat => nat,
            Domain::Syn => syn,
        };
        let dec = &trace.dec;

        let mut d_shared_act: Option<Tensor<T>> = None;
        if let Some(g) = &grads.reconstruction {
            assert!(g.same_shape(trace.reconstruction()), "reconstruction gradient shape");
            let mut g = g.clone();
            let out = trace.reconstruction();
            for (d, &y) in g.data.iter_mut().zip(&out.data) {
                *d *= y * (T::one() - y);
            }
            for i in (0..branch.decoder.len()).rev() {
                let x = if i == 0 { &dec.shared_act } else { &dec.layers[i - 1] };
                let dx = branch.decoder[i].backward(x, &g, true).expect("input grad");
                g = dx;
                if i > 0 {
                    leaky_relu_backward(&dec.layers[i - 1].data, &mut g.data, slope);
                }
            }
            d_shared_act = Some(g);
        }

        let mut dz = vec![T::zero(); n * latent];
        let mut dmu_reg: Option<Vec<T>> = None;
        if let Some(gc) = &grads.count {
            assert_eq!(gc.len(), n);
            let r = &trace.reg;
            let mut g = Tensor::dense(n, 1, gc.clone());
            g = regressor.out.backward(&r.hidden[1].out, &g, true).expect("input grad");
            for i in (0..2).rev() {
                g = r.hidden[i].backward(g, slope);
                let x = if i == 0 { &r.input } else { &r.hidden[0].out };
                g = regressor.hidden[i].backward(x, &g, true).expect("input grad");
            }
            match tap {
                RegressorTap::Latent => {
                    for (d, v) in dz.iter_mut().zip(&g.data) {
                        *d += *v;
                    }
                }
                RegressorTap::LatentMean => dmu_reg = Some(g.data.clone()),
                RegressorTap::SharedDecoder => {
                    let sa = &dec.shared_act;
                    let p = sa.h * sa.w;
                    let inv = T::of(1.0 / p as f64);
                    let acc = d_shared_act.get_or_insert_with(|| Tensor::zeros(sa.n, sa.c, sa.h, sa.w));
                    for i in 0..n {
                        let gi = g.sample(i).to_vec();
                        let s = acc.sample_mut(i);
                        for (ch, &gv) in gi.iter().enumerate() {
                            s[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v += gv * inv);
                        }
                    }
                }
            }
        }

        if let Some(mut g) = d_shared_act {
            leaky_relu_backward(&dec.shared_act.data, &mut g.data, slope);
            let cache = dec
                .norm
                .as_ref()
                .expect("backward requires a training-mode forward pass");
            g = shared.norm.backward(cache, &g);
            let code = dec.expand.out.clone().reshape(shared.deconv.in_channels, 1, 1);
            let dcode = shared.deconv.backward(&code, &g, true).expect("input grad");
            let dexp = dec.expand.backward(dcode.reshape(dec.expand.out.c, 1, 1), slope);
            let dzd = shared.expand.backward(&dec.z, &dexp, true).expect("input grad");
            for (d, v) in dz.iter_mut().zip(&dzd.data) {
                *d += *v;
            }
        }

        let enc = &trace.enc;
        let mut dmu = dz.clone();
        let mut dlv = vec![T::zero(); n * latent];
        if let Some(eps) = &trace.eps {
            let half = T::of(0.5);
            for i in 0..n * latent {
                dlv[i] = dz[i] * eps[i] * half * (enc.logvar.data[i] * half).exp();
            }
        }
        if let Some(g) = &grads.mu {
            dmu.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
        }
        if let Some(g) = &dmu_reg {
            dmu.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
        }
        if let Some(g) = &grads.logvar {
            dlv.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
        }
        let dmu = Tensor::dense(n, latent, dmu);
        let dlv = Tensor::dense(n, latent, dlv);
        let mut dh = shared.mu.backward(&enc.hidden.out, &dmu, true).expect("input grad");
        let dh2 = shared.logvar.backward(&enc.hidden.out, &dlv, true).expect("input grad");
        dh.data.iter_mut().zip(&dh2.data).for_each(|(a, b)| *a += *b);
        let dh = enc.hidden.backward(dh, slope);
        let flat = &enc.convs[4].out;
        let mut g = shared.hidden.backward(flat, &dh, true).expect("input grad");

        g = enc.convs[4].backward(g, slope);
        g = shared.conv.backward(&enc.convs[3].out, &g, true).expect("input grad");
        for i in (0..4).rev() {
            g = enc.convs[i].backward(g, slope);
            let x = if i == 0 { &enc.input } else { &enc.convs[i - 1].out };
            match branch.encoder[i].backward(x, &g, i > 0) {
                Some(dx) => g = dx,
                None => break,
            }
        }
    }

    /// Folds the batch statistics of a training pass into the batch-norm
    /// running moments.
    pub fn commit_batch_statistics(&mut self, trace: &Trace<T>) {
        if let Some(cache) = &trace.dec.norm {
            self.shared.norm.update_running_stats(cache);
        }
    }

    /// Encoder only: `(mu, logvar)` per sample.
    pub fn encode_batch(&self, images: &[&Image], domain: Domain, mode: &mut Mode<'_>) -> Result<(Tensor<T>, Tensor<T>)> {
        let enc = self.run_encoder(images_to_tensor(images)?, domain, mode);
        Ok((enc.mu, enc.logvar))
    }

    /// Decoder only, from latent codes `n × latent_dim`.
    pub fn decode_batch(&self, z: Tensor<T>, domain: Domain, mode: &mut Mode<'_>) -> Result<Tensor<T>> {
        if z.features() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent has {} entries, model expects {}",
                z.features(),
                self.config.latent_dim
            )));
        }
        let mut dec = self.run_decoder(z, domain, mode);
        Ok(dec.layers.pop().expect("decoder ran"))
    }

    /// Regressor only, from latent codes. With the shared-decoder tap the
    /// code is first run through the shared decoder layer.
    pub fn regress_batch(&self, z: Tensor<T>, mode: &mut Mode<'_>) -> Result<Vec<T>> {
        if z.features() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent has {} entries, model expects {}",
                z.features(),
                self.config.latent_dim
            )));
        }
        let input = match self.config.regressor_tap {
            RegressorTap::Latent | RegressorTap::LatentMean => z,
            RegressorTap::SharedDecoder => {
                let dec = self.run_decoder(z, Domain::Syn, mode);
                self.regressor_input(&dec.z, &dec.z, &dec.shared_act)
            }
        };
        Ok(self.run_regressor(input, mode).out.data)
    }

    pub fn encode(&self, image: &Image, domain: Domain) -> Result<LatentCode> {
        let (mu, logvar) = self.encode_batch(&[image], domain, &mut Mode::Eval)?;
        Ok(LatentCode {
            z: to_f32(&mu.data),
            mu: to_f32(&mu.data),
            logvar: to_f32(&logvar.data),
        })
    }

    pub fn decode(&self, z: &[f32], domain: Domain) -> Result<Image> {
        let z = Tensor::dense(1, z.len(), z.iter().map(|&v| T::of(v as f64)).collect());
        let out = self.decode_batch(z, domain, &mut Mode::Eval)?;
        Image::from_pixels(SIZE, SIZE, to_f32(&out.data))
    }

    /// Evaluation-mode count estimate for one latent code, clamped at zero.
    pub fn regress(&self, z: &[f32]) -> Result<f32> {
        let z = Tensor::dense(1, z.len(), z.iter().map(|&v| T::of(v as f64)).collect());
        Ok(self.regress_batch(z, &mut Mode::Eval)?[0].as_f64().max(0.0) as f32)
    }

    pub fn forward(&self, image: &Image, domain: Domain, mode: &mut Mode<'_>) -> Result<ForwardOutput> {
        let mut out = self.forward_many(&[image], domain, mode)?;
        Ok(ForwardOutput {
            reconstruction: out.reconstructions.pop().expect("one sample"),
            latent: LatentCode {
                mu: out.mu.pop().expect("one sample"),
                logvar: out.logvar.pop().expect("one sample"),
                z: out.z.pop().expect("one sample"),
            },
            count_estimate: out.counts[0].max(0.0),
        })
    }

    /// Batched forward pass converted to `f32` per-sample outputs. Counts are
    /// returned unclamped.
    pub fn forward_many(&self, images: &[&Image], domain: Domain, mode: &mut Mode<'_>) -> Result<BatchOutput> {
        let trace = self.forward_images(images, domain, mode)?;
        let n = trace.batch_size();
        let rec = trace.reconstruction();
        Ok(BatchOutput {
            reconstructions: (0..n)
                .map(|i| Image::from_pixels(SIZE, SIZE, to_f32(rec.sample(i))).expect("decoder emits 128x128"))
                .collect(),
            mu: (0..n).map(|i| to_f32(trace.mu().sample(i))).collect(),
            logvar: (0..n).map(|i| to_f32(trace.logvar().sample(i))).collect(),
            z: (0..n).map(|i| to_f32(trace.z().sample(i))).collect(),
            counts: to_f32(trace.counts()),
        })
    }
}
