//! Criteria that check properties and oracles rather than trained models.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use twincount::baseline::{grid_search, GridSpec};
use twincount::dataio::{Batch, Sample};
use twincount::evaluation::metrics;
use twincount::hyperopt::{
    expected_improvement, run_search, Dimension, GpConfig, GpModel, NoiseModel, Scale, SearchConfig, SearchSpace,
};
use twincount::nn::{max_orthogonality_error, Param, Tensor};
use twincount::synthgen::{generate_dataset, generate_samples, GeneratorConfig, OverlapPolicy, Range, Style};
use twincount::training::{
    accumulate_batch, bce_loss, kld_batch, kld_loss, mse_loss, radam_rectified, rec_batch, regr_batch, regr_loss,
    train, twin_loss, DecayMode, DomainWeights, EffectiveWeights, LossWeights, Optimizer, OptimizerConfig,
    OptimizerKind, RecKind, TrainConfig, WeightDecaySchedule,
};
use twincount::twinvae::{Mode, ModelConfig, ModelParams, OutputGrads, ParamGroup, Trace};
use twincount::{Domain, Image};

use crate::{ensure, within_budget, Verdict};

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    Image::from_fn(128, 128, |_, _| rng.random::<f32>())
}

fn random_batch(rng: &mut ChaCha8Rng, domain: Domain, size: usize) -> Batch {
    Batch {
        images: (0..size).map(|_| random_image(rng)).collect(),
        labels: (0..size)
            .map(|_| rng.random_bool(0.7).then(|| rng.random_range(1..=30)))
            .collect(),
        ids: (0..size).map(|i| format!("r{i}")).collect(),
        domain,
    }
}

fn pixels_to_image(t: &Tensor<f32>, i: usize) -> Image {
    Image::from_pixels(128, 128, t.sample(i).to_vec()).unwrap()
}

/// Weights and losses recomputed per sample from the scalar loss functions.
fn oracle_domain_total(
    model: &ModelParams<f32>,
    batch: &Batch,
    weights: &LossWeights,
    epoch: usize,
    regressor_active: bool,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = model
        .forward_images(&batch.image_refs(), batch.domain, &mut Mode::Train(&mut rng))
        .unwrap();
    let b = batch.size() as f64;
    let (mut rec, mut kld, mut regr) = (0.0, 0.0, 0.0);
    for i in 0..batch.size() {
        let recon = pixels_to_image(trace.reconstruction(), i);
        rec += match weights.rec_kind {
            RecKind::Mse => mse_loss(&batch.images[i], &recon).unwrap(),
            RecKind::Bce => bce_loss(&batch.images[i], &recon).unwrap(),
        };
        let mu: Vec<f64> = trace.mu().sample(i).iter().map(|&v| v as f64).collect();
        let lv: Vec<f64> = trace.logvar().sample(i).iter().map(|&v| v as f64).collect();
        kld += kld_loss(&mu, &lv);
        if let Some(l) = batch.labels[i] {
            regr += regr_loss(trace.counts()[i] as f64, l as f64);
        }
    }
    let d = match batch.domain {
        Domain::Nat => weights.nat,
        Domain::Syn => weights.syn,
    };
    let w_rec = match (weights.rec_kind, weights.bce_decay) {
        (RecKind::Mse, _) => d.w_rec,
        (RecKind::Bce, DecayMode::Multiplicative) => d.w_rec * (1.0 - weights.bce_decay_rate).powi(epoch as i32),
        (RecKind::Bce, DecayMode::Additive) => d.w_rec * (1.0 - weights.bce_decay_rate * epoch as f64).max(0.0),
    };
    let w_regr = if regressor_active { d.w_regr } else { 0.0 };
    w_rec * rec / b + w_regr * regr / b + d.w_kld * kld / b
}

pub fn loss_decomposition() -> Verdict {
    let start = Instant::now();
    let config = ModelConfig::scaled(0.125);
    let mut model = ModelParams::<f32>::init(&config, 1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for trial in 0..1000u64 {
        let mut dw = || DomainWeights {
            w_rec: rng.random_range(0.0..200.0),
            w_regr: rng.random_range(0.0..10.0),
            w_kld: rng.random_range(0.0..5.0),
        };
        let (nat_w, syn_w) = (dw(), dw());
        let weights = LossWeights {
            nat: nat_w,
            syn: syn_w,
            rec_kind: if rng.random_bool(0.5) { RecKind::Mse } else { RecKind::Bce },
            bce_decay_rate: rng.random_range(0.0..1e-3),
            bce_decay: if rng.random_bool(0.5) { DecayMode::Multiplicative } else { DecayMode::Additive },
        };
        let epoch = rng.random_range(0..5000);
        let active = rng.random_bool(0.5);
        let size = rng.random_range(1..=3);
        let nat = random_batch(&mut rng, Domain::Nat, size);
        let syn = random_batch(&mut rng, Domain::Syn, size);
        let (seed_n, seed_s) = (2 * trial, 2 * trial + 1);
        let oracle = oracle_domain_total(&model, &nat, &weights, epoch, active, seed_n)
            + oracle_domain_total(&model, &syn, &weights, epoch, active, seed_s);
        let en = EffectiveWeights::resolve(&weights, Domain::Nat, epoch, active);
        let es = EffectiveWeights::resolve(&weights, Domain::Syn, epoch, active);
        let cn = accumulate_batch(&mut model, &nat, &en, weights.rec_kind, &mut ChaCha8Rng::seed_from_u64(seed_n))
            .map_err(|e| e.to_string())?;
        let cs = accumulate_batch(&mut model, &syn, &es, weights.rec_kind, &mut ChaCha8Rng::seed_from_u64(seed_s))
            .map_err(|e| e.to_string())?;
        model.zero_grad();
        let report = twin_loss(Some(cn), Some(cs), &weights, epoch, active);
        let rel = (report.total - oracle).abs() / oracle.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        ensure(rel <= 1e-6, || format!("batch {trial}: total {} vs oracle {oracle} (rel {rel:.2e})", report.total))?;
    }
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!("1000 batches, worst relative deviation {worst:.2e}"))
}

pub fn analytic_kld() -> Verdict {
    let zero = kld_loss(&[0.0; 256], &[0.0; 256]);
    let one = kld_loss(&[1.0], &[0.0]);
    let four = kld_loss(&[0.0], &[4f64.ln()]);
    ensure(zero == 0.0, || format!("kld(0,0) = {zero}"))?;
    ensure((one - 0.5).abs() <= 1e-12, || format!("kld(1,0) = {one}"))?;
    ensure((four - 0.8069).abs() <= 1e-4, || format!("kld(0,log 4) = {four}"))?;
    Ok(format!("kld(0,0)={}, kld(1,0)={one}, kld(0,log 4)={four:.6}", zero + 0.0))
}

/// Twin loss on one labeled batch per domain, differentiated analytically.
fn twin_objective(m: &ModelParams<f64>, x: &[(Tensor<f64>, Domain, Vec<Option<u32>>)], seed: u64, grads: bool) -> (f64, Vec<Trace<f64>>, Vec<OutputGrads<f64>>) {
    let w = DomainWeights::default();
    let mut total = 0.0;
    let mut traces = Vec::new();
    let mut outs = Vec::new();
    for (k, (input, domain, labels)) in x.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + k as u64);
        let t = m.forward_batch(input.clone(), *domain, &mut Mode::Train(&mut rng));
        let (rec, drec) = rec_batch(RecKind::Mse, t.inputs(), t.reconstruction(), w.w_rec);
        let (kld, dmu, dlv) = kld_batch(t.mu(), t.logvar(), w.w_kld);
        let (regr, dcount) = regr_batch(t.counts(), labels, w.w_regr);
        total += w.w_rec * rec + w.w_kld * kld + w.w_regr * regr;
        if grads {
            outs.push(OutputGrads {
                reconstruction: Some(drec),
                count: Some(dcount),
                mu: Some(dmu),
                logvar: Some(dlv),
            });
        }
        traces.push(t);
    }
    (total, traces, outs)
}

fn group_name(g: ParamGroup) -> String {
    match g {
        ParamGroup::Encoder(d) => format!("encoder-{d}"),
        ParamGroup::Decoder(d) => format!("decoder-{d}"),
        ParamGroup::Shared => "shared".into(),
        ParamGroup::Regressor => "regressor".into(),
    }
}

pub fn gradient_check() -> Verdict {
    const STEP: f64 = 1e-5;
    const PER_GROUP: usize = 4;
    let start = Instant::now();
    let config = ModelConfig::scaled(0.125);
    let mut m = ModelParams::<f32>::init(&config, 3).map_err(|e| e.to_string())?.cast::<f64>();
    let samples = [
        generate_samples(&GeneratorConfig::preset(Style::PseudoNatPc), 2, 5).map_err(|e| e.to_string())?,
        generate_samples(&GeneratorConfig::preset(Style::SynPc), 2, 6).map_err(|e| e.to_string())?,
    ];
    let data: Vec<(Tensor<f64>, Domain, Vec<Option<u32>>)> = samples
        .iter()
        .map(|s| {
            let px: Vec<f64> = s.iter().flat_map(|x| x.image.pixels().iter().map(|&p| p as f64)).collect();
            (Tensor::from_vec(s.len(), 1, 128, 128, px), s[0].domain, s.iter().map(|x| x.label).collect())
        })
        .collect();
    const SEED: u64 = 77;
    m.zero_grad();
    let (_, traces, grads) = twin_objective(&m, &data, SEED, true);
    for (t, g) in traces.iter().zip(&grads) {
        m.backward(t, g);
    }
    let base_pattern: Vec<Vec<bool>> = traces.iter().map(|t| t.activation_pattern()).collect();
    let analytic = m.clone();
    let tensors = analytic.params();
    let mut by_group: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, (g, p)) in tensors.iter().enumerate() {
        if p.trainable {
            by_group.entry(group_name(*g)).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let (mut checked, mut skipped, mut inert) = (0usize, 0usize, 0usize);
    let mut worst: f64 = 0.0;
    for (group, idxs) in &by_group {
        let mut done = 0;
        while done < PER_GROUP {
            let ti = idxs[rng.random_range(0..idxs.len())];
            let j = rng.random_range(0..tensors[ti].1.len());
            let eval = |delta: f64| {
                let mut p = m.clone();
                p.params_mut()[ti].1.value[j] += delta;
                let (loss, t, _) = twin_objective(&p, &data, SEED, false);
                (loss, t.iter().map(|t| t.activation_pattern()).collect::<Vec<_>>())
            };
            let (lp, pp) = eval(STEP);
            let (lm, pm) = eval(-STEP);
            // A rectifier switching inside [θ−h, θ+h] leaves no derivative to
            // compare against; draw another parameter.
            if pp != base_pattern || pm != base_pattern {
                skipped += 1;
                ensure(skipped < 200, || "too many parameters sit on rectifier kinks".into())?;
                continue;
            }
            let fd = (lp - lm) / (2.0 * STEP);
            let an = tensors[ti].1.grad[j];
            // Batch normalization cancels some tensors entirely (the bias
            // before it); the loss is flat in them and a relative error is
            // undefined. Their analytic gradient must vanish too.
            if fd == 0.0 {
                ensure(an.abs() <= 1e-12, || format!("{}[{j}]: flat loss but analytic {an:.3e}", tensors[ti].1.name))?;
                inert += 1;
                ensure(inert < 200, || "too many inert parameters".into())?;
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            ensure(rel <= 1e-4, || {
                format!("{group} {}[{j}]: analytic {an:.6e}, central difference {fd:.6e}, rel {rel:.2e}", tensors[ti].1.name)
            })?;
            done += 1;
            checked += 1;
        }
    }
    ensure(by_group.len() == 6, || format!("expected 6 subnetworks, saw {}", by_group.len()))?;
    ensure(checked >= 20, || format!("only {checked} parameters checked"))?;
    within_budget(start, Duration::from_secs(300))?;
    Ok(format!(
        "{checked} parameters over {} subnetworks, worst relative error {worst:.2e} ({skipped} redrawn at kinks, {inert} with a flat loss)",
        by_group.len()
    ))
}

pub fn shape_chains() -> Verdict {
    let img = Image::constant(0.5);
    for scale in [0.125, 0.5, 1.0] {
        let m = ModelParams::<f32>::init(&ModelConfig::scaled(scale), 0).map_err(|e| e.to_string())?;
        for domain in Domain::ALL {
            let t = m.forward_images(&[&img], domain, &mut Mode::Eval).map_err(|e| e.to_string())?;
            let enc = t.encoder_sizes();
            let dec = t.decoder_sizes();
            ensure(enc == [128, 64, 32, 16, 8, 4], || format!("scale {scale} {domain}: encoder {enc:?}"))?;
            ensure(dec == [1, 5, 13, 29, 61, 62, 128], || format!("scale {scale} {domain}: decoder {dec:?}"))?;
        }
    }
    Ok("encoder [128,64,32,16,8,4], decoder [1,5,13,29,61,62,128] at scales 0.125, 0.5, 1.0".into())
}

pub fn orthogonal_init() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut layers = 0;
    for scale in [0.125, 1.0] {
        let m = ModelParams::<f32>::init(&ModelConfig::scaled(scale), 9).map_err(|e| e.to_string())?;
        for (_, p) in m.params() {
            if p.trainable && p.shape.len() >= 2 {
                let e = max_orthogonality_error(p);
                ensure(e <= 1e-5, || format!("scale {scale}: {} has max |WWᵀ−I| = {e:.2e}", p.name))?;
                worst = worst.max(e);
                layers += 1;
            }
        }
    }
    Ok(format!("{layers} weight tensors, worst deviation {worst:.2e}"))
}

fn collect_active(m: &mut ModelParams<f32>) -> Vec<(bool, &mut Param<f32>)> {
    m.params_mut().into_iter().map(|(_, p)| (true, p)).collect()
}

pub fn weight_sharing() -> Verdict {
    let config = ModelConfig::scaled(0.125);
    let mut m = ModelParams::<f32>::init(&config, 4).map_err(|e| e.to_string())?;
    let probe = generate_samples(&GeneratorConfig::preset(Style::PseudoNatPc), 1, 8).map_err(|e| e.to_string())?;
    let before = m.forward(&probe[0].image, Domain::Nat, &mut Mode::Eval).map_err(|e| e.to_string())?;
    let nat_before = m.nat.clone();
    let syn = generate_samples(&GeneratorConfig::preset(Style::SynPc), 4, 9).map_err(|e| e.to_string())?;
    let batch = Batch {
        images: syn.iter().map(|s| s.image.clone()).collect(),
        labels: syn.iter().map(|s| s.label).collect(),
        ids: syn.iter().map(|s| s.id.clone()).collect(),
        domain: Domain::Syn,
    };
    let w = EffectiveWeights { w_rec: 100.0, w_regr: 3.0, w_kld: 2.0 };
    accumulate_batch(&mut m, &batch, &w, RecKind::Mse, &mut ChaCha8Rng::seed_from_u64(1)).map_err(|e| e.to_string())?;
    let nat_grad_zero = m.nat.encoder.iter().all(|c| c.weight.grad.iter().all(|&g| g == 0.0));
    ensure(nat_grad_zero, || "synthetic loss produced natural-encoder gradients".into())?;
    let mut opt = Optimizer::new(OptimizerConfig { learning_rate: 1e-3, ..Default::default() }).map_err(|e| e.to_string())?;
    opt.step(collect_active(&mut m)).map_err(|e| e.to_string())?;
    ensure(m.nat == nat_before, || "natural-only tensors changed".into())?;
    let after = m.forward(&probe[0].image, Domain::Nat, &mut Mode::Eval).map_err(|e| e.to_string())?;
    let moved = before
        .reconstruction
        .pixels()
        .iter()
        .zip(after.reconstruction.pixels())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    ensure(moved > 0.0 && before.latent.mu != after.latent.mu, || "natural forward output did not change".into())?;
    ensure(before.count_estimate != after.count_estimate || before.latent.mu != after.latent.mu, || {
        "natural count path unchanged".into()
    })?;
    Ok(format!(
        "one synthetic-only step moved the natural reconstruction by up to {moved:.2e}; natural-only tensors untouched"
    ))
}

fn dir_digest(dir: &Path) -> String {
    let mut names: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".png") || n == "manifest.csv")
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        h.update(fs::read(dir.join(&n)).unwrap());
    }
    hex::encode(h.finalize())
}

pub fn determinism() -> Verdict {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = GeneratorConfig::preset(Style::SynBf);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ma = generate_dataset(&config, 100, 42, &a).map_err(|e| e.to_string())?;
    let mb = generate_dataset(&config, 100, 42, &b).map_err(|e| e.to_string())?;
    let (da, db) = (dir_digest(&a), dir_digest(&b));
    ensure(da == db, || format!("dataset digests differ: {da} vs {db}"))?;
    ensure(ma.content_hash().ok() == mb.content_hash().ok(), || "manifest content hashes differ".into())?;

    let syn = generate_samples(&GeneratorConfig::preset(Style::SynPc), 48, 1).map_err(|e| e.to_string())?;
    let nat = generate_samples(&GeneratorConfig::preset(Style::PseudoNatPc), 48, 2).map_err(|e| e.to_string())?;
    let model = ModelConfig::scaled(0.125);
    let mut tc = TrainConfig { batch_size: 8, max_epochs: 10, regressor_start_epoch: 3, seed: 5, ..Default::default() };
    tc.early_stop.patience = 100;
    let run = |dir: &Path| {
        let out = train(&model, &tc, Some(&syn), Some(&nat), Some(dir)).map_err(|e| e.to_string())?;
        let log = fs::read(dir.join("loss_log.csv")).map_err(|e| e.to_string())?;
        Ok::<_, String>((out.history, log))
    };
    let (h1, l1) = run(&tmp.path().join("r1"))?;
    let (h2, l2) = run(&tmp.path().join("r2"))?;
    ensure(h1.len() == 10, || format!("{} epochs recorded", h1.len()))?;
    ensure(h1 == h2, || "loss traces differ between identical runs".into())?;
    ensure(l1 == l2, || "loss logs differ between identical runs".into())?;
    within_budget(start, Duration::from_secs(300))?;
    Ok(format!("dataset digest {}…, 10-epoch traces identical", &da[..12]))
}

/// Hand-written Adam/RAdam recurrences on `f(θ) = Σ aᵢ (θᵢ − cᵢ)²`.
fn reference_trajectory(kind: OptimizerKind, lr: f64, steps: usize, a: &[f64], c: &[f64], theta0: &[f64]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut theta = theta0.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let mut path = Vec::new();
    let mut rectified = Vec::new();
    for t in 1..=steps as i32 {
        let g: Vec<f64> = (0..theta.len()).map(|i| 2.0 * a[i] * (theta[i] - c[i])).collect();
        let b2t = b2.powi(t);
        let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        let rect = rho > 4.0;
        rectified.push(rect);
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - b1.powi(t));
            theta[i] -= match kind {
                OptimizerKind::Adam => lr * m_hat / ((v[i] / (1.0 - b2t)).sqrt() + eps),
                OptimizerKind::Radam if rect => {
                    let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                    let l = (1.0 - b2t).sqrt() / (v[i].sqrt() + eps);
                    lr * m_hat * r * l
                }
                OptimizerKind::Radam => lr * m_hat,
            };
        }
        path.push(theta.clone());
    }
    (path, rectified)
}

pub fn optimizer_oracle() -> Verdict {
    let a = [0.5, 1.0, 2.0, 3.5, 0.1];
    let c = [1.0, -2.0, 0.5, 3.0, -0.7];
    let theta0 = [0.3, 0.8, -1.2, 2.0, 4.0];
    let mut worst: f64 = 0.0;
    for kind in [OptimizerKind::Adam, OptimizerKind::Radam] {
        let lr = 0.05;
        let (path, rectified) = reference_trajectory(kind, lr, 10, &a, &c, &theta0);
        let mut opt = Optimizer::new(OptimizerConfig {
            kind,
            learning_rate: lr,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            weight_decay: 0.0,
            weight_decay_schedule: WeightDecaySchedule::PerStep,
        })
        .map_err(|e| e.to_string())?;
        let mut p = Param::<f64>::zeros("theta", &[5]);
        p.value.copy_from_slice(&theta0);
        for (t, expected) in path.iter().enumerate() {
            for i in 0..5 {
                p.grad[i] = 2.0 * a[i] * (p.value[i] - c[i]);
            }
            opt.step(vec![(true, &mut p)]).map_err(|e| e.to_string())?;
            for i in 0..5 {
                let d = (p.value[i] - expected[i]).abs();
                worst = worst.max(d);
                ensure(d <= 1e-10, || format!("{kind:?} step {}: θ[{i}] {} vs {}", t + 1, p.value[i], expected[i]))?;
            }
        }
        if kind == OptimizerKind::Radam {
            ensure(rectified[..4].iter().all(|r| !r), || "reference rectifies before step 5".into())?;
            ensure((1..=4).all(|t| !radam_rectified(t, 0.999)), || "RAdam rectifies before step 5".into())?;
            ensure(radam_rectified(5, 0.999) && rectified[4], || "RAdam does not rectify at step 5".into())?;
        }
    }
    Ok(format!("10 Adam and 10 RAdam steps, worst deviation {worst:.1e}; RAdam momentum-only for t=1..4"))
}

pub fn watershed_calibration() -> Verdict {
    let start = Instant::now();
    let mut details = Vec::new();
    for style in [Style::SynPc, Style::SynBf] {
        let mut g = GeneratorConfig::preset(style);
        g.overlap_policy = OverlapPolicy::Forbid { min_distance_factor: 1.0 };
        g.noise_amplitude = Range::fixed(0.0);
        g.cell_blur = Range::fixed(0.0);
        g.global_blur = Range::fixed(0.0);
        let samples: Vec<Sample> = generate_samples(&g, 200, 2024).map_err(|e| e.to_string())?;
        let grid = GridSpec::default_for(style);
        let result = grid_search(&samples, &grid).map_err(|e| e.to_string())?;
        let best = result.best();
        ensure(best.report.accuracy >= 0.95, || {
            format!("{style}: best exact-count rate {:.1}% with {:?}", 100.0 * best.report.accuracy, best.params)
        })?;
        details.push(format!("{style} {:.1}% exact", 100.0 * best.report.accuracy));
    }
    within_budget(start, Duration::from_secs(600))?;
    Ok(details.join(", "))
}

pub fn gp_hyperopt() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let f = |x: &[f64]| (3.0 * x[0]).sin() + x[1] * x[1] - 0.5 * x[0] * x[1];
    let points: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    let values: Vec<f64> = points.iter().map(|p| f(p)).collect();
    let gp = GpModel::fit(&points, &values, &GpConfig { noise: NoiseModel::Floor, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let mut worst_fit: f64 = 0.0;
    for (p, v) in points.iter().zip(&values) {
        worst_fit = worst_fit.max((gp.predict(p).0 - v).abs());
    }
    ensure(worst_fit <= 1e-6, || format!("interpolation error {worst_fit:.2e}"))?;

    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    for _ in 0..20_000 {
        let x = [rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0)];
        let (m, var) = gp.predict(&x);
        let ei = expected_improvement(m, var, best);
        ensure(ei >= 0.0 && ei.is_finite(), || format!("EI {ei} at {x:?}"))?;
        let mean: f64 = rng.random_range(-1e3..1e3);
        let var: f64 = if rng.random_bool(0.1) { 0.0 } else { 10f64.powf(rng.random_range(-12.0..4.0)) };
        let ei = expected_improvement(mean, var, rng.random_range(-1e3..1e3));
        ensure(ei >= 0.0 && ei.is_finite(), || format!("EI {ei} at mean {mean}, var {var}"))?;
    }

    let space = SearchSpace { dimensions: vec![Dimension::new("x", -2.0, 3.0, Scale::Linear, false)] };
    let target = 0.7;
    let result = run_search(&space, 20, 3, &SearchConfig::default(), None, |raw| Ok((raw["x"] - target).powi(2)))
        .map_err(|e| e.to_string())?;
    let x = result.best.raw_config["x"];
    ensure(result.history.len() == 20, || format!("{} iterations", result.history.len()))?;
    ensure((x - target).abs() <= 1e-2, || format!("best x {x}, minimum at {target}"))?;
    within_budget(start, Duration::from_secs(60))?;
    Ok(format!(
        "interpolation error {worst_fit:.1e}, EI non-negative on 40000 probes, quadratic minimum found at x={x:.4} in 20 iterations"
    ))
}

#[derive(Debug, PartialEq)]
struct Oracle {
    mae: f64,
    mre: f64,
    accuracy: f64,
    per_count: Vec<(u32, usize, f64, f64, f64)>,
}

/// Straightforward multi-pass reference: one scan for the totals and one
/// scan per distinct label.
fn brute_force(preds: &[f64], labels: &[u32]) -> Oracle {
    let exact = |p: f64, l: u32| p >= l as f64 - 0.5 && p < l as f64 + 0.5;
    let summarize = |idx: &[usize]| {
        let (mut abs, mut rel, mut hits) = (0.0, 0.0, 0usize);
        for &i in idx {
            let e = (preds[i] - labels[i] as f64).abs();
            abs += e;
            rel += e / labels[i] as f64;
            if exact(preds[i], labels[i]) {
                hits += 1;
            }
        }
        let n = idx.len() as f64;
        (abs / n, rel / n, hits as f64 / n)
    };
    let all: Vec<usize> = (0..preds.len()).collect();
    let (mae, mre, accuracy) = summarize(&all);
    let mut distinct: Vec<u32> = labels.to_vec();
    distinct.sort();
    distinct.dedup();
    let per_count = distinct
        .into_iter()
        .map(|c| {
            let idx: Vec<usize> = all.iter().copied().filter(|&i| labels[i] == c).collect();
            let (a, r, acc) = summarize(&idx);
            (c, idx.len(), a, r, acc)
        })
        .collect();
    Oracle { mae, mre, accuracy, per_count }
}

pub fn metrics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..1000 {
        let n = rng.random_range(1..200);
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(1..=30)).collect();
        let preds: Vec<f64> = labels
            .iter()
            .map(|&l| match rng.random_range(0..4) {
                0 => l as f64 + if rng.random_bool(0.5) { 0.5 } else { -0.5 },
                1 => l as f64,
                2 => rng.random_range(-3.0..40.0),
                _ => l as f64 + rng.random_range(-2.0..2.0),
            })
            .collect();
        let r = metrics(&preds, &labels).map_err(|e| e.to_string())?;
        let got = Oracle {
            mae: r.mae,
            mre: r.mre,
            accuracy: r.accuracy,
            per_count: r.per_count.iter().map(|(&c, m)| (c, m.n, m.mae, m.mre, m.accuracy)).collect(),
        };
        let want = brute_force(&preds, &labels);
        ensure(got == want, || format!("set {trial}: {got:?} vs {want:?}"))?;
    }
    Ok("1000 random sets match exactly".into())
}
