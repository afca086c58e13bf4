//! Bayesian hyperparameter search: a Gaussian-process surrogate over the
//! unit cube and expected improvement as the acquisition.

mod gp;
mod neldermead;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

pub use gp::{GpConfig, GpModel, NoiseModel, NOISE_FLOOR};
pub use neldermead::minimize_bounded;

use crate::error::{invalid, Error, Result};
use crate::training::TrainConfig;
use crate::twinvae::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
    /// Rounded to an integer in raw units.
    #[serde(default)]
    pub integer: bool,
}

impl Dimension {
    pub fn new(name: &str, lower: f64, upper: f64, scale: Scale, integer: bool) -> Self {
        Dimension {
            name: name.to_string(),
            lower,
            upper,
            scale,
            integer,
        }
    }

    /// Maps `u ∈ [0, 1]` to raw units, rounding integer dimensions.
    pub fn to_raw(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let v = match self.scale {
            Scale::Linear => self.lower + u * (self.upper - self.lower),
            Scale::Log => (self.lower.ln() + u * (self.upper.ln() - self.lower.ln())).exp(),
        };
        let v = v.clamp(self.lower, self.upper);
        if self.integer {
            v.round().clamp(self.lower.ceil(), self.upper.floor())
        } else {
            v
        }
    }

    pub fn to_unit(&self, v: f64) -> f64 {
        let u = match self.scale {
            Scale::Linear => (v - self.lower) / (self.upper - self.lower),
            Scale::Log => (v.ln() - self.lower.ln()) / (self.upper.ln() - self.lower.ln()),
        };
        u.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub dimensions: Vec<Dimension>,
}

impl Default for SearchSpace {
    /// Learning rate, latent width, shared convolution width and the three
    /// loss weights.
    fn default() -> Self {
        SearchSpace {
            dimensions: vec![
                Dimension::new("learning_rate", 1e-5, 1e-2, Scale::Log, false),
                Dimension::new("latent_dim", 16.0, 512.0, Scale::Log, true),
                Dimension::new("shared_conv_channels", 32.0, 1024.0, Scale::Log, true),
                Dimension::new("w_rec", 1.0, 1000.0, Scale::Log, false),
                Dimension::new("w_regr", 0.1, 30.0, Scale::Log, false),
                Dimension::new("w_kld", 0.01, 20.0, Scale::Log, false),
            ],
        }
    }
}

pub type RawConfig = BTreeMap<String, f64>;

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.dimensions.is_empty() {
            return Err(invalid("search space has no dimensions"));
        }
        for d in &self.dimensions {
            if !(d.lower < d.upper) || !d.lower.is_finite() || !d.upper.is_finite() {
                return Err(invalid(format!("dimension `{}` needs lower < upper", d.name)));
            }
            if d.scale == Scale::Log && d.lower <= 0.0 {
                return Err(invalid(format!("log-scaled dimension `{}` needs lower > 0", d.name)));
            }
            if d.integer && d.lower.ceil() > d.upper.floor() {
                return Err(invalid(format!("integer dimension `{}` contains no integer", d.name)));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dimensions.len()
    }

    pub fn to_raw(&self, point: &[f64]) -> RawConfig {
        self.dimensions
            .iter()
            .zip(point)
            .map(|(d, &u)| (d.name.clone(), d.to_raw(u)))
            .collect()
    }

    /// Snaps a unit-cube point so integer dimensions sit on their rounded
    /// raw values.
    pub fn snap(&self, point: &[f64]) -> Vec<f64> {
        self.dimensions
            .iter()
            .zip(point)
            .map(|(d, &u)| if d.integer { d.to_unit(d.to_raw(u)) } else { u.clamp(0.0, 1.0) })
            .collect()
    }
}

/// Writes a raw configuration into model and training configs. Unknown names
/// are rejected.
pub fn apply_raw(raw: &RawConfig, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
    for (name, &v) in raw {
        match name.as_str() {
            "learning_rate" => train.optimizer.learning_rate = v,
            "latent_dim" => model.latent_dim = v as usize,
            "shared_conv_channels" => model.shared_channels = Some(v as usize),
            "w_rec" => {
                train.loss.nat.w_rec = v;
                train.loss.syn.w_rec = v;
            }
            "w_regr" => {
                train.loss.nat.w_regr = v;
                train.loss.syn.w_regr = v;
            }
            "w_kld" => {
                train.loss.nat.w_kld = v;
                train.loss.syn.w_kld = v;
            }
            "batch_size" => train.batch_size = v as usize,
            "dropout_rate" => model.dropout_rate = v,
            other => return Err(invalid(format!("unknown search dimension `{other}`"))),
        }
    }
    Ok(())
}

/// Expected improvement below `best` for minimization.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    let gain = best - mean;
    if sigma <= 0.0 || !sigma.is_finite() {
        return gain.max(0.0);
    }
    let u = gain / sigma;
    let n = Normal::standard();
    (gain * n.cdf(u) + sigma * n.pdf(u)).max(0.0)
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Point `index` (from 1) of the Halton sequence in `d` dimensions.
pub fn halton(index: u64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let base = PRIMES[k % PRIMES.len()];
            let (mut f, mut r, mut i) = (1.0, 0.0, index);
            while i > 0 {
                f /= base as f64;
                r += f * (i % base) as f64;
                i /= base;
            }
            r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Space-filling suggestions before the surrogate takes over.
    pub initial_points: usize,
    pub candidates: usize,
    /// Nelder–Mead refinements started from the best candidates.
    pub refine_starts: usize,
    pub gp: GpConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            initial_points: 5,
            candidates: 2048,
            refine_starts: 3,
            gp: GpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Completed,
    Failed,
}

/// One evaluated configuration; one JSON line in the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub point: Vec<f64>,
    pub raw_config: RawConfig,
    /// Lower is better; `None` for failed trials.
    pub objective: Option<f64>,
    pub status: TrialStatus,
    pub duration_s: f64,
}

/// Next unit-cube point given the history so far.
pub fn suggest<R: Rng + ?Sized>(trials: &[Trial], space: &SearchSpace, config: &SearchConfig, rng: &mut R) -> Result<Vec<f64>> {
    space.validate()?;
    let d = space.dim();
    let done: Vec<&Trial> = trials.iter().filter(|t| t.status == TrialStatus::Completed).collect();
    if trials.len() < config.initial_points || done.is_empty() {
        return Ok(space.snap(&halton(trials.len() as u64 + 1, d)));
    }
    let points: Vec<Vec<f64>> = done.iter().map(|t| t.point.clone()).collect();
    let values: Vec<f64> = done.iter().map(|t| t.objective.expect("completed")).collect();
    let gp = GpModel::fit(&points, &values, &config.gp)?;
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    let incumbent = points[values.iter().position(|&v| v == best).expect("non-empty")].clone();
    let ei = |x: &[f64]| {
        let (m, v) = gp.predict(x);
        expected_improvement(m, v, best)
    };
    let mut scored: Vec<(Vec<f64>, f64)> = Vec::with_capacity(config.candidates + 1);
    scored.push((incumbent.clone(), ei(&incumbent)));
    for _ in 0..config.candidates {
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let s = ei(&x);
        scored.push((x, s));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (lo, hi) = (vec![0.0; d], vec![1.0; d]);
    let mut best_point = scored[0].clone();
    let mut starts: Vec<Vec<f64>> = scored.iter().take(config.refine_starts).map(|s| s.0.clone()).collect();
    starts.push(incumbent);
    for s in starts {
        let (x, neg) = minimize_bounded(&|x: &[f64]| -ei(x), &s, &lo, &hi, 200);
        if -neg > best_point.1 {
            best_point = (x, -neg);
        }
    }
    let snapped = space.snap(&best_point.0);
    // A snapped duplicate of an evaluated point teaches the surrogate nothing.
    if points.iter().any(|p| p == &snapped) {
        let fallback = scored
            .iter()
            .map(|s| space.snap(&s.0))
            .find(|p| !points.contains(p));
        if let Some(p) = fallback {
            return Ok(p);
        }
    }
    Ok(snapped)
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: Trial,
    pub history: Vec<Trial>,
}

/// Runs `budget` trials sequentially. The objective callback returns the
/// value to minimize; errors and non-finite values mark the trial failed.
/// With `history_path`, each trial is appended as one JSON line.
pub fn run_search<F>(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    config: &SearchConfig,
    history_path: Option<&Path>,
    mut objective: F,
) -> Result<SearchResult>
where
    F: FnMut(&RawConfig) -> Result<f64>,
{
    space.validate()?;
    if budget == 0 {
        return Err(invalid("budget must be >= 1"));
    }
    let mut writer = match history_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history: Vec<Trial> = Vec::with_capacity(budget);
    for _ in 0..budget {
        let point = suggest(&history, space, config, &mut rng)?;
        let raw = space.to_raw(&point);
        let start = Instant::now();
        let value = objective(&raw).ok().filter(|v| v.is_finite());
        let trial = Trial {
            point,
            raw_config: raw,
            objective: value,
            status: if value.is_some() { TrialStatus::Completed } else { TrialStatus::Failed },
            duration_s: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = writer.as_mut() {
            serde_json::to_writer(&mut *w, &trial)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        history.push(trial);
    }
    let best = history
        .iter()
        .filter(|t| t.status == TrialStatus::Completed)
        .min_by(|a, b| a.objective.expect("completed").total_cmp(&b.objective.expect("completed")))
        .cloned()
        .ok_or(Error::AllTrialsFailed(budget))?;
    Ok(SearchResult { best, history })
}
