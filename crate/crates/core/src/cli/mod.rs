//! Command-line front end. Each subcommand reads an optional JSON
//! [`RunConfig`], applies flag overrides, locks its output directory, writes
//! `run.json` and then its artifacts.

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{HpoConfig, Paths, RunConfig, RunLock, RunRecord, LOCK_FILE, RUN_RECORD, SEED_ENV};

use crate::baseline::{grid_search, GridSpec};
use crate::dataio::{load_dataset, Sample};
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, export_latents, translate_many, write_report, write_translations};
use crate::hyperopt::{apply_raw, run_search};
use crate::synthgen::{generate_dataset, Style};
use crate::training::{train, Preset};
use crate::twinvae::load_checkpoint;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "twincount", version, about = "Cell counting with a twin variational autoencoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed; falls back to the config file, then TWINCOUNT_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory for all outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a labeled synthetic dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of images.
        #[arg(long)]
        n: usize,
        /// Rendering style: syn-pc, syn-bf, pseudo-nat-pc or pseudo-nat-bf.
        #[arg(long)]
        style: Option<Style>,
    },
    /// Train a model on one or both domains.
    Train {
        #[command(flatten)]
        common: Common,
        /// Loss, optimizer and batch-size bundle: pc or bf.
        #[arg(long)]
        preset: Option<Preset>,
        /// Synthetic-domain dataset directory.
        #[arg(long)]
        syn: Option<PathBuf>,
        /// Natural-domain dataset directory.
        #[arg(long)]
        nat: Option<PathBuf>,
        /// Epoch cap; overrides the config.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Score a checkpoint on a labeled dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Labeled dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Encoder branch to use; defaults to each sample's own domain.
        #[arg(long)]
        domain: Option<Domain>,
    },
    /// Grid-search the watershed counting baseline.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Labeled dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Style whose default grid is searched when the config has none.
        #[arg(long, default_value = "syn-pc")]
        style: Style,
    },
    /// Bayesian hyperparameter search over training runs.
    Hpo {
        #[command(flatten)]
        common: Common,
        /// Synthetic-domain dataset directory.
        #[arg(long)]
        syn: Option<PathBuf>,
        /// Natural-domain dataset directory.
        #[arg(long)]
        nat: Option<PathBuf>,
        /// Number of trials.
        #[arg(long)]
        budget: Option<usize>,
        /// Loss, optimizer and batch-size bundle: pc or bf.
        #[arg(long)]
        preset: Option<Preset>,
        /// Epoch cap; overrides the config.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Translate images from one domain to the other.
    Translate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Source domain: nat or syn.
        #[arg(long)]
        from: Domain,
        /// Target domain: nat or syn.
        #[arg(long)]
        to: Domain,
    },
    /// Export latent means as CSV.
    Embed {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate { .. } => "generate",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Baseline { .. } => "baseline",
            Command::Hpo { .. } => "hpo",
            Command::Translate { .. } => "translate",
            Command::Embed { .. } => "embed",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Generate { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Baseline { common, .. }
            | Command::Hpo { common, .. }
            | Command::Translate { common, .. }
            | Command::Embed { common, .. } => common,
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit code. Messages go to stdout on success and stderr otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| Error::InvalidInput(format!("--{name} is required (or set paths.{name} in the config)")))
}

fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    Ok(load_dataset(dir)?.samples)
}

/// Runs a parsed command and returns its one-line summary.
pub fn execute(command: Command) -> Result<String> {
    let name = command.name();
    let common = command.common();
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = config.resolve_seed(common.seed)?;
    let out_flag = common.out.clone();
    match command {
        Command::Generate { n, style, .. } => {
            if let Some(s) = style {
                let distribution = config.generator.count_distribution.clone();
                config.generator = crate::synthgen::GeneratorConfig {
                    count_distribution: distribution,
                    ..crate::synthgen::GeneratorConfig::preset(s)
                };
            }
            config.validate()?;
            let out = required(out_flag, &config.paths.out, "out")?;
            let _lock = RunLock::acquire(&out)?;
            RunRecord::new(name, seed, &config).write(&out)?;
            let manifest = generate_dataset(&config.generator, n, seed, &out)?;
            Ok(format!(
                "generated {} {} images in {} (hash {})",
                manifest.len(),
                config.generator.style,
                out.display(),
                manifest.content_hash()?
            ))
        }
        Command::Train {
            preset,
            syn,
            nat,
            max_epochs,
            ..
        } => {
            apply_train_flags(&mut config, preset, max_epochs, seed);
            config.validate()?;
            let out = required(out_flag, &config.paths.out, "out")?;
            let syn = syn.or(config.paths.syn.clone());
            let nat = nat.or(config.paths.nat.clone());
            if syn.is_none() && nat.is_none() {
                return Err(Error::InvalidInput("train needs --syn, --nat or both".into()));
            }
            let syn = syn.as_deref().map(load_samples).transpose()?;
            let nat = nat.as_deref().map(load_samples).transpose()?;
            let _lock = RunLock::acquire(&out)?;
            RunRecord::new(name, seed, &config).write(&out)?;
            let outcome = train(&config.model, &config.train, syn.as_deref(), nat.as_deref(), Some(&out))?;
            let best = &outcome.history[outcome.best_epoch.min(outcome.history.len() - 1)];
            Ok(format!(
                "trained {} epochs; best epoch {} (validation total {}); checkpoints in {}",
                outcome.history.len(),
                outcome.best_epoch,
                best.validation.as_ref().map_or("n/a".to_string(), |v| format!("{:.6}", v.total)),
                out.display()
            ))
        }
        Command::Evaluate { checkpoint, data, domain, .. } => {
            config.validate()?;
            let out = required(out_flag, &config.paths.out, "out")?;
            let ckpt = required(checkpoint, &config.paths.checkpoint, "checkpoint")?;
            let data = required(data, &config.paths.data, "data")?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let samples = load_samples(&data)?;
            let _lock = RunLock::acquire(&out)?;
            RunRecord::new(name, seed, &config).write(&out)?;
            let report = evaluate(&model, &samples, domain)?;
            write_report(&report, &out)?;
            Ok(report.summary())
        }
        Command::Baseline { data, style, .. } => {
            config.validate()?;
            let out = required(out_flag, &config.paths.out, "out")?;
            let data = required(data, &config.paths.data, "data")?;
            let samples = load_samples(&data)?;
            let grid = config.grid.clone().unwrap_or_else(|| GridSpec::default_for(style));
            let _lock = RunLock::acquire(&out)?;
            RunRecord::new(name, seed, &config).write(&out)?;
            let result = grid_search(&samples, &grid)?;
            result.write(&out)?;
            Ok(format!("baseline over {} grid points: {}", grid.size(), result.best().report.summary()))
        }
        Command::Hpo {
            syn,
            nat,
            budget,
            preset,
            max_epochs,
            ..
        } => {
            apply_train_flags(&mut config, preset, max_epochs, seed);
            if let Some(b) = budget {
                config.hpo.budget = b;
            }
            config.validate()?;
            let out = required(out_flag, &config.paths.out, "out")?;
            let syn = syn.or(config.paths.syn.clone());
            let nat = nat.or(config.paths.nat.clone());
            if syn.is_none() && nat.is_none() {
                return Err(Error::InvalidInput("hpo needs --syn, --nat or both".into()));
            }
            let syn = syn.as_deref().map(load_samples).transpose()?;
            let nat = nat.as_deref().map(load_samples).transpose()?;
            let _lock = RunLock::acquire(&out)?;
            RunRecord::new(name, seed, &config).write(&out)?;
            let mut trial = 0usize;
            let result = run_search(
                &config.hpo.space,
                config.hpo.budget,
                seed,
                &config.hpo.search,
                Some(&out.join("trials.jsonl")),
                |raw| {
                    let (mut model, mut train_cfg) = (config.model.clone(), config.train.clone());
                    apply_raw(raw, &mut model, &mut train_cfg)?;
                    model.validate()?;
                    train_cfg.validate()?;
                    let dir = out.join(format!("trial_{trial:03}"));
                    trial += 1;
                    fs::create_dir_all(&dir)?;
                    let outcome = train(&model, &train_cfg, syn.as_deref(), nat.as_deref(), Some(&dir))?;
                    trial_objective(&outcome.history)
                },
            )?;
            fs::write(out.join("best.json"), serde_json::to_vec_pretty(&result.best)?)?;
            Ok(format!(
                "hpo: {} trials, best objective {:.6}",
                result.history.len(),
                result.best.objective.unwrap_or(f64::NAN)
            ))
        }
        Command::Translate {
            checkpoint, data, from, to, ..
        } => {
            config.validate()?;
            let out = required(out_flag, &config.paths.out, "out")?;
            let ckpt = required(checkpoint, &config.paths.checkpoint, "checkpoint")?;
            let data = required(data, &config.paths.data, "data")?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let samples = load_samples(&data)?;
            let _lock = RunLock::acquire(&out)?;
            RunRecord::new(name, seed, &config).write(&out)?;
            let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
            let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
            let results = translate_many(&model, &images, from, to)?;
            write_translations(&results, &ids, &out)?;
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_path(out.join("translations.csv"))?;
            w.write_record(["id", "source_estimate", "translated_estimate"])?;
            for (r, id) in results.iter().zip(&ids) {
                w.write_record([
                    id.as_str(),
                    &r.source_count_estimate.to_string(),
                    &r.translated_count_estimate.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(format!("translated {} images {from} -> {to} into {}", results.len(), out.display()))
        }
        Command::Embed { checkpoint, data, .. } => {
            config.validate()?;
            let out = required(out_flag, &config.paths.out, "out")?;
            let ckpt = required(checkpoint, &config.paths.checkpoint, "checkpoint")?;
            let data = required(data, &config.paths.data, "data")?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let samples = load_samples(&data)?;
            let _lock = RunLock::acquire(&out)?;
            RunRecord::new(name, seed, &config).write(&out)?;
            let path = out.join("latents.csv");
            export_latents(&model, &samples, &path)?;
            Ok(format!("exported {} latent vectors to {}", samples.len(), path.display()))
        }
    }
}

fn apply_train_flags(config: &mut RunConfig, preset: Option<Preset>, max_epochs: Option<usize>, seed: u64) {
    if let Some(p) = preset {
        let base = crate::training::TrainConfig::preset(p);
        config.train.batch_size = base.batch_size;
        config.train.loss.rec_kind = base.loss.rec_kind;
        config.train.optimizer.kind = base.optimizer.kind;
    }
    if let Some(m) = max_epochs {
        config.train.max_epochs = m;
        config.train.regressor_start_epoch = config.train.regressor_start_epoch.min(m);
    }
    config.train.seed = seed;
}

/// Best natural-domain validation MAE; without natural labels, the MAE over
/// all labeled samples, then the validation loss.
fn trial_objective(history: &[crate::training::EpochRecord]) -> Result<f64> {
    let best = |f: fn(&crate::training::EpochRecord) -> Option<f64>| {
        history.iter().filter_map(f).fold(f64::INFINITY, f64::min)
    };
    let mae = best(|r| r.validation_mae_nat);
    if mae.is_finite() {
        return Ok(mae);
    }
    let mae = best(|r| r.validation_mae);
    if mae.is_finite() {
        return Ok(mae);
    }
    let loss = best(|r| r.validation.as_ref().map(|v| v.total));
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Empty("validation results"))
    }
}
