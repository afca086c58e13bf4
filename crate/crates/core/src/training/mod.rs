//! Twin loss, optimizers and the paired-batch training loop.

mod loss;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    bce_loss, kld_batch, kld_loss, mse_loss, rec_batch, regr_batch, regr_loss, twin_loss, Components, DecayMode,
    DomainWeights, EffectiveWeights, LossReport, LossWeights, RecKind, BCE_CLAMP,
};
pub use optim::{radam_rectified, radam_rho, Optimizer, OptimizerConfig, OptimizerKind, WeightDecaySchedule};

use crate::dataio::{split, AugmentConfig, Batch, BatchStream, Sample};
use crate::domain::Domain;
use crate::error::{invalid, Error, Result};
use crate::nn::Tensor;
use crate::synthgen::derive_seed;
use crate::twinvae::{save_checkpoint, CheckpointMeta, Mode, ModelConfig, ModelParams, OutputGrads, ParamGroup, RngState};

pub const LOSS_LOG_HEADER: &str = "epoch,total,rec_nat,rec_syn,regr_nat,regr_syn,kld_nat,kld_syn,lr,w_rec_eff";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStop {
    /// Epochs without sufficient improvement before stopping.
    pub patience: usize,
    pub min_improvement: f64,
    /// Share of each domain's training samples held out for validation.
    pub validation_fraction: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            patience: 2000,
            min_improvement: 1e-4,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Phase contrast: MSE reconstruction, Adam, batch 128.
    Pc,
    /// Bright field: BCE reconstruction, RAdam, batch 64.
    Bf,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pc" => Ok(Preset::Pc),
            "bf" => Ok(Preset::Bf),
            _ => Err(Error::InvalidInput(format!("unknown preset `{s}` (expected pc or bf)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Samples per domain batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub regressor_start_epoch: usize,
    pub early_stop: EarlyStop,
    pub seed: u64,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    /// Which domains are augmented.
    pub augment_domains: Vec<Domain>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Pc)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let (rec_kind, kind, batch_size) = match preset {
            Preset::Pc => (RecKind::Mse, OptimizerKind::Adam, 128),
            Preset::Bf => (RecKind::Bce, OptimizerKind::Radam, 64),
        };
        TrainConfig {
            batch_size,
            max_epochs: 50_000,
            regressor_start_epoch: 100,
            early_stop: EarlyStop::default(),
            seed: 0,
            loss: LossWeights {
                rec_kind,
                ..Default::default()
            },
            optimizer: OptimizerConfig {
                kind,
                ..Default::default()
            },
            augment: Some(AugmentConfig::default()),
            augment_domains: Domain::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(invalid("max_epochs must be >= 1"));
        }
        if self.regressor_start_epoch > self.max_epochs {
            return Err(invalid(format!(
                "regressor_start_epoch {} exceeds max_epochs {}",
                self.regressor_start_epoch, self.max_epochs
            )));
        }
        let es = &self.early_stop;
        if !(0.0..1.0).contains(&es.validation_fraction) {
            return Err(invalid("validation_fraction must be in [0, 1)"));
        }
        if !(es.min_improvement >= 0.0) {
            return Err(invalid("min_improvement must be >= 0"));
        }
        if es.patience == 0 {
            return Err(invalid("patience must be >= 1"));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// Per-epoch record: mean training losses over the epoch's steps and
/// evaluation-mode validation losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossReport,
    pub validation: Option<LossReport>,
    /// Mean absolute count error on labeled validation samples (both domains).
    pub validation_mae: Option<f64>,
    /// The same over natural-domain samples only.
    pub validation_mae_nat: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams<f32>,
    pub best_epoch: usize,
    pub last: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Forward, loss and backward for one domain batch. Returns the unweighted
/// components; gradients are accumulated into `model`.
pub fn accumulate_batch(
    model: &mut ModelParams<f32>,
    batch: &Batch,
    weights: &EffectiveWeights,
    rec_kind: RecKind,
    rng: &mut ChaCha8Rng,
) -> Result<Components> {
    let trace = model.forward_images(&batch.image_refs(), batch.domain, &mut Mode::Train(rng))?;
    let (rec, drec) = rec_batch(rec_kind, trace.inputs(), trace.reconstruction(), weights.w_rec);
    let (kld, dmu, dlv) = kld_batch(trace.mu(), trace.logvar(), weights.w_kld);
    let (regr, dcount) = regr_batch(trace.counts(), &batch.labels, weights.w_regr);
    let grads = OutputGrads {
        reconstruction: (weights.w_rec > 0.0).then_some(drec),
        count: (weights.w_regr > 0.0).then_some(dcount),
        mu: Some(dmu),
        logvar: Some(dlv),
    };
    model.backward(&trace, &grads);
    model.commit_batch_statistics(&trace);
    Ok(Components { rec, regr, kld })
}

/// Evaluation-mode components of a batch, and its count estimates.
pub fn evaluate_batch(model: &ModelParams<f32>, batch: &Batch, rec_kind: RecKind) -> Result<(Components, Vec<f32>)> {
    let trace = model.forward_images(&batch.image_refs(), batch.domain, &mut Mode::Eval)?;
    let (rec, _) = rec_batch(rec_kind, trace.inputs(), trace.reconstruction(), 1.0);
    let (kld, _, _) = kld_batch(trace.mu(), trace.logvar(), 1.0);
    let (regr, _) = regr_batch(trace.counts(), &batch.labels, 1.0);
    Ok((Components { rec, regr, kld }, trace.counts().to_vec()))
}

fn mean_components(acc: &[(Components, usize)]) -> Option<Components> {
    let n: usize = acc.iter().map(|a| a.1).sum();
    if n == 0 {
        return None;
    }
    let mut out = Components::default();
    for (c, k) in acc {
        let w = *k as f64 / n as f64;
        out.rec += c.rec * w;
        out.regr += c.regr * w;
        out.kld += c.kld * w;
    }
    Some(out)
}

fn active_mask(model: &mut ModelParams<f32>, regressor_active: bool) -> Vec<(bool, &mut crate::nn::Param<f32>)> {
    model
        .params_mut()
        .into_iter()
        .map(|(g, p)| (regressor_active || g != ParamGroup::Regressor, p))
        .collect()
}

/// State of one training run. Drive it with [`Trainer::run_epoch`] or let
/// [`Trainer::run`] loop to completion.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: ModelParams<f32>,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    syn: Option<BatchStream<'a>>,
    nat: Option<BatchStream<'a>>,
    validation: Vec<Batch>,
    epoch: usize,
    best: Option<(f64, usize, ModelParams<f32>)>,
    history: Vec<EpochRecord>,
    log: Option<BufWriter<File>>,
    out_dir: Option<PathBuf>,
}

/// Training and validation samples of one domain after the split.
pub struct DomainData {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
}

impl DomainData {
    pub fn split(samples: &[Sample], fraction: f64, seed: u64) -> Self {
        let (train, validation) = split(samples, fraction, seed);
        DomainData { train, validation }
    }
}

impl<'a> Trainer<'a> {
    /// `syn` and `nat` hold each domain's split data; either may be absent
    /// (single-branch training). An epoch is one pass over the synthetic
    /// training set, or over the natural one when there is no synthetic data.
    pub fn new(
        model_config: &ModelConfig,
        config: TrainConfig,
        syn: Option<&'a DomainData>,
        nat: Option<&'a DomainData>,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        if syn.is_none() && nat.is_none() {
            return Err(Error::Empty("training data"));
        }
        let model = ModelParams::<f32>::init(model_config, derive_seed(config.seed, 0))?;
        let stream_for = |d: Option<&'a DomainData>, domain: Domain, k: u64| -> Result<Option<BatchStream<'a>>> {
            match d {
                None => Ok(None),
                Some(d) => {
                    if let Some(s) = d.train.iter().chain(&d.validation).find(|s| s.domain != domain) {
                        return Err(Error::InvalidInput(format!(
                            "sample `{}` is {} but was given as {domain} data",
                            s.id, s.domain
                        )));
                    }
                    let aug = config.augment.clone().filter(|_| config.augment_domains.contains(&domain));
                    Ok(Some(BatchStream::new(
                        &d.train,
                        config.batch_size,
                        derive_seed(config.seed, k),
                        aug,
                    )?))
                }
            }
        };
        let syn_stream = stream_for(syn, Domain::Syn, 1)?;
        let nat_stream = stream_for(nat, Domain::Nat, 2)?;
        let mut validation = Vec::new();
        for d in [syn, nat].into_iter().flatten() {
            for chunk in d.validation.chunks(config.batch_size.max(1)) {
                validation.push(Batch {
                    images: chunk.iter().map(|s| s.image.clone()).collect(),
                    labels: chunk.iter().map(|s| s.label).collect(),
                    ids: chunk.iter().map(|s| s.id.clone()).collect(),
                    domain: chunk[0].domain,
                });
            }
        }
        let log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("train_config.json"), serde_json::to_vec_pretty(&config)?)?;
                fs::write(dir.join("model_config.json"), serde_json::to_vec_pretty(model_config)?)?;
                let mut f = BufWriter::new(
                    OpenOptions::new()
                        .create(true)
                        .write(true)
                        .truncate(true)
                        .open(dir.join("loss_log.csv"))?,
                );
                writeln!(f, "{LOSS_LOG_HEADER}")?;
                f.flush()?;
                Some(f)
            }
            None => None,
        };
        Ok(Trainer {
            optimizer: Optimizer::new(config.optimizer.clone())?,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 3)),
            model,
            config,
            syn: syn_stream,
            nat: nat_stream,
            validation,
            epoch: 0,
            best: None,
            history: Vec::new(),
            log,
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }

    /// Replaces the initial parameters (for resuming or fixed starts).
    pub fn with_model(mut self, model: ModelParams<f32>) -> Self {
        self.model = model;
        self
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn regressor_active(&self) -> bool {
        self.epoch >= self.config.regressor_start_epoch
    }

    fn steps_per_epoch(&self) -> usize {
        self.syn
            .as_ref()
            .or(self.nat.as_ref())
            .map_or(0, BatchStream::batches_per_pass)
    }

    /// One optimization step on a paired batch.
    pub fn step(&mut self) -> Result<LossReport> {
        let epoch = self.epoch;
        let active = self.regressor_active();
        let rec_kind = self.config.loss.rec_kind;
        self.model.zero_grad();
        let mut parts: [Option<Components>; 2] = [None, None];
        for domain in Domain::ALL {
            let stream = match domain {
                Domain::Syn => self.syn.as_mut(),
                Domain::Nat => self.nat.as_mut(),
            };
            if let Some(stream) = stream {
                let batch = stream.next_batch();
                let w = EffectiveWeights::resolve(&self.config.loss, domain, epoch, active);
                parts[domain.index()] = Some(accumulate_batch(&mut self.model, &batch, &w, rec_kind, &mut self.rng)?);
            }
        }
        let report = twin_loss(parts[0], parts[1], &self.config.loss, epoch, active);
        if !report.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("non-finite training loss {report:?}"),
            });
        }
        self.optimizer
            .step(active_mask(&mut self.model, active))
            .map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { epoch, detail },
                other => other,
            })?;
        Ok(report)
    }

    /// Validation losses (evaluation mode) and count MAE over labeled
    /// validation samples.
    /// Validation losses with the count MAE over all labeled samples and
    /// over natural-domain ones.
    pub fn validate(&self) -> Result<Option<(LossReport, Option<f64>, Option<f64>)>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let mut acc: [Vec<(Components, usize)>; 2] = [Vec::new(), Vec::new()];
        let (mut abs_err, mut labeled) = ([0.0; 2], [0usize; 2]);
        for batch in &self.validation {
            let (c, counts) = evaluate_batch(&self.model, batch, self.config.loss.rec_kind)?;
            acc[batch.domain.index()].push((c, batch.size()));
            for (est, label) in counts.iter().zip(&batch.labels) {
                if let Some(l) = label {
                    abs_err[batch.domain.index()] += (est.max(0.0) as f64 - *l as f64).abs();
                    labeled[batch.domain.index()] += 1;
                }
            }
        }
        let report = twin_loss(
            mean_components(&acc[0]),
            mean_components(&acc[1]),
            &self.config.loss,
            self.epoch,
            self.regressor_active(),
        );
        let (all_err, all_n) = (abs_err[0] + abs_err[1], labeled[0] + labeled[1]);
        let nat = Domain::Nat.index();
        Ok(Some((
            report,
            (all_n > 0).then(|| all_err / all_n as f64),
            (labeled[nat] > 0).then(|| abs_err[nat] / labeled[nat] as f64),
        )))
    }

    /// Runs one epoch; returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let steps = self.steps_per_epoch();
        let mut acc: [Vec<(Components, usize)>; 2] = [Vec::new(), Vec::new()];
        for _ in 0..steps {
            let r = self.step()?;
            for d in Domain::ALL {
                let present = match d {
                    Domain::Syn => self.syn.is_some(),
                    Domain::Nat => self.nat.is_some(),
                };
                if present {
                    acc[d.index()].push((r.components(d), 1));
                }
            }
        }
        let active = self.regressor_active();
        self.optimizer.end_epoch(active_mask(&mut self.model, active));
        let train = twin_loss(
            mean_components(&acc[0]),
            mean_components(&acc[1]),
            &self.config.loss,
            self.epoch,
            active,
        );
        let (validation, validation_mae, validation_mae_nat) = match self.validate()? {
            Some((r, mae, mae_nat)) => (Some(r), mae, mae_nat),
            None => (None, None, None),
        };
        if let Some(v) = &validation {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    epoch: self.epoch,
                    detail: format!("non-finite validation loss {v:?}"),
                });
            }
        }
        let record = EpochRecord {
            epoch: self.epoch,
            train,
            validation,
            validation_mae,
            validation_mae_nat,
        };
        self.write_log(&record)?;
        self.track_best(&record);
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    fn write_log(&mut self, r: &EpochRecord) -> Result<()> {
        if let Some(f) = self.log.as_mut() {
            let t = &r.train;
            let w = if self.syn.is_some() { t.weights_syn.w_rec } else { t.weights_nat.w_rec };
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                t.total,
                t.rec_nat,
                t.rec_syn,
                t.regr_nat,
                t.regr_syn,
                t.kld_nat,
                t.kld_syn,
                self.optimizer.config().learning_rate,
                w
            )?;
            f.flush()?;
        }
        Ok(())
    }

    /// The validation objective changes when the regressor joins, so the
    /// best-so-far is reset at that epoch.
    fn track_best(&mut self, r: &EpochRecord) {
        let score = r.validation.as_ref().unwrap_or(&r.train).total;
        if r.epoch == self.config.regressor_start_epoch {
            self.best = None;
        }
        let improved = match &self.best {
            None => true,
            Some((best, _, _)) => score < best - self.config.early_stop.min_improvement,
        };
        if improved {
            self.best = Some((score, r.epoch, self.model.clone()));
        }
    }

    fn should_stop(&self) -> bool {
        match &self.best {
            Some((_, best_epoch, _)) => {
                self.epoch > self.config.regressor_start_epoch
                    && self.epoch - 1 - best_epoch >= self.config.early_stop.patience
            }
            None => false,
        }
    }

    fn rng_state(&self) -> RngState {
        RngState {
            seed: derive_seed(self.config.seed, 3),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    /// Trains until `max_epochs` or early stopping; writes `best.ckpt` and
    /// `last.ckpt` when an output directory was given.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let mut stopped_early = false;
        while self.epoch < self.config.max_epochs {
            self.run_epoch()?;
            if self.should_stop() {
                stopped_early = true;
                break;
            }
        }
        let (_, best_epoch, best) = self.best.take().expect("at least one epoch ran");
        if let Some(dir) = &self.out_dir {
            let rng = Some(self.rng_state());
            save_checkpoint(
                &dir.join("best.ckpt"),
                &best,
                &CheckpointMeta {
                    rng,
                    epoch: Some(best_epoch),
                },
            )?;
            save_checkpoint(
                &dir.join("last.ckpt"),
                &self.model,
                &CheckpointMeta {
                    rng,
                    epoch: Some(self.epoch.saturating_sub(1)),
                },
            )?;
        }
        Ok(TrainOutcome {
            best,
            best_epoch,
            last: self.model,
            history: self.history,
            stopped_early,
        })
    }
}

/// Splits each domain, trains, and returns the outcome.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    syn: Option<&[Sample]>,
    nat: Option<&[Sample]>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let frac = config.early_stop.validation_fraction;
    let syn = syn.map(|s| DomainData::split(s, frac, derive_seed(config.seed, 4)));
    let nat = nat.map(|s| DomainData::split(s, frac, derive_seed(config.seed, 5)));
    Trainer::new(model_config, config.clone(), syn.as_ref(), nat.as_ref(), out_dir)?.run()
}

/// Stacks images into an `n × 1 × 128 × 128` tensor.
pub fn to_tensor(batch: &Batch) -> Tensor<f32> {
    let mut data = Vec::with_capacity(batch.size() * 128 * 128);
    for img in &batch.images {
        data.extend_from_slice(img.pixels());
    }
    Tensor::from_vec(batch.size(), 1, 128, 128, data)
}
