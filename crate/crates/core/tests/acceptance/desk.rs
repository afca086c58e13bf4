//! Desk-scale training criteria. The twin run of criterion 10 is reused by
//! criterion 14.

use std::time::{Duration, Instant};

use twincount::dataio::{strip_labels, Sample};
use twincount::evaluation::{constant_predictor_mae, evaluate, translate_many};
use twincount::synthgen::{generate_samples, GeneratorConfig, Style};
use twincount::training::{train, TrainConfig, TrainOutcome};
use twincount::twinvae::{ModelConfig, ModelParams, RegressorTap};
use twincount::Domain;

use crate::{ensure, within_budget, Verdict};

/// Desk-scale architecture: a quarter of the channels, no dropout, and the
/// regressor reading the latent mean so training and evaluation agree.
fn desk_model() -> ModelConfig {
    ModelConfig {
        dropout_rate: 0.0,
        regressor_tap: RegressorTap::LatentMean,
        ..ModelConfig::scaled(0.25)
    }
}

fn desk_training(seed: u64, max_epochs: usize) -> TrainConfig {
    let mut tc = TrainConfig {
        batch_size: 32,
        max_epochs,
        regressor_start_epoch: 0,
        seed,
        ..Default::default()
    };
    tc.optimizer.learning_rate = 3e-4;
    tc.early_stop.patience = max_epochs;
    tc
}

fn samples(style: Style, n: usize, seed: u64) -> Result<Vec<Sample>, String> {
    generate_samples(&GeneratorConfig::preset(style), n, seed).map_err(|e| e.to_string())
}

fn mean_label(s: &[Sample]) -> f64 {
    let labels: Vec<f64> = s.iter().filter_map(|s| s.label.map(f64::from)).collect();
    labels.iter().sum::<f64>() / labels.len() as f64
}

#[derive(Default)]
pub struct Shared {
    twin: Option<ModelParams<f32>>,
}

const SYN_EPOCHS: usize = 60;

pub fn synthetic_only() -> Verdict {
    let start = Instant::now();
    let train_set = samples(Style::SynPc, 1000, 901)?;
    let test_set = samples(Style::SynPc, 200, 902)?;
    let outcome = train(&desk_model(), &desk_training(9, SYN_EPOCHS), Some(&train_set), None, None)
        .map_err(|e| e.to_string())?;
    let report = evaluate(&outcome.best, &test_set, None).map_err(|e| e.to_string())?;
    let baseline = constant_predictor_mae(mean_label(&train_set), &test_set).ok_or("empty test set")?;
    let detail = format!(
        "test MAE {:.3} after {} epochs (best epoch {}), constant-mean MAE {baseline:.3}",
        report.mae,
        outcome.history.len(),
        outcome.best_epoch
    );
    ensure(outcome.history.len() <= 2000, || format!("{detail}; too many epochs"))?;
    ensure(report.mae <= 1.5, || format!("{detail}; above 1.5"))?;
    ensure(report.mae <= 0.5 * baseline, || format!("{detail}; above half the constant-mean MAE"))?;
    within_budget(start, Duration::from_secs(45 * 60))?;
    Ok(detail)
}

const TWIN_EPOCHS: usize = 60;

fn run_twin_comparison(shared: &mut Shared) -> Result<(f64, f64, TrainOutcome), String> {
    let syn = samples(Style::SynPc, 1000, 1001)?;
    let mut nat = samples(Style::PseudoNatPc, 1000, 1002)?;
    strip_labels(&mut nat, 50, 1003);
    let test_set = samples(Style::PseudoNatPc, 200, 1004)?;
    let model = desk_model();
    let config = desk_training(10, TWIN_EPOCHS);
    let twin = train(&model, &config, Some(&syn), Some(&nat), None).map_err(|e| e.to_string())?;
    let nat_only = train(&model, &config, None, Some(&nat), None).map_err(|e| e.to_string())?;
    let twin_mae = evaluate(&twin.best, &test_set, Some(Domain::Nat)).map_err(|e| e.to_string())?.mae;
    let nat_mae = evaluate(&nat_only.best, &test_set, Some(Domain::Nat)).map_err(|e| e.to_string())?.mae;
    shared.twin = Some(twin.best.clone());
    Ok((twin_mae, nat_mae, twin))
}

pub fn twin_benefit(shared: &mut Shared) -> Verdict {
    let start = Instant::now();
    let (twin_mae, nat_mae, twin) = run_twin_comparison(shared)?;
    let detail = format!(
        "pseudo-natural test MAE twin {twin_mae:.3} vs natural-only {nat_mae:.3} over {} epochs each",
        twin.history.len()
    );
    ensure(twin_mae < nat_mae, || format!("{detail}; no benefit"))?;
    within_budget(start, Duration::from_secs(2 * 3600))?;
    Ok(detail)
}

pub fn translation_consistency(shared: &mut Shared) -> Verdict {
    if shared.twin.is_none() {
        run_twin_comparison(shared)?;
    }
    let model = shared.twin.as_ref().expect("trained above");
    let probe = samples(Style::PseudoNatPc, 100, 1401)?;
    let images: Vec<_> = probe.iter().map(|s| &s.image).collect();
    let results = translate_many(model, &images, Domain::Nat, Domain::Syn).map_err(|e| e.to_string())?;
    let agree = results
        .iter()
        .filter(|r| (r.translated_count_estimate - r.source_count_estimate).abs() <= 1.0)
        .count();
    let detail = format!("{agree}/100 translations re-encode within ±1 of the source estimate");
    ensure(agree >= 80, || detail.clone())?;
    Ok(detail)
}
