//! Count metrics, cross-domain translation and latent export.
//!
//! Everything here runs the model in evaluation mode (`z = mu`), so results
//! are pure functions of the parameters and inputs.

mod metrics;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use metrics::{is_exact, metrics, round_count, CountMetrics, MetricsReport};

use crate::dataio::Sample;
use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Tensor;
use crate::twinvae::{Mode, ModelParams};

/// Samples per forward batch during evaluation.
pub const EVAL_BATCH: usize = 32;

/// Evaluation-mode count estimates, clamped at zero, in sample order.
pub fn predict_counts(model: &ModelParams<f32>, samples: &[Sample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for run in samples.chunk_by(|a, b| a.domain == b.domain) {
        for chunk in run.chunks(EVAL_BATCH) {
            let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let trace = model.forward_images(&images, chunk[0].domain, &mut Mode::Eval)?;
            out.extend(trace.counts().iter().map(|&c| c.max(0.0) as f64));
        }
    }
    Ok(out)
}

/// Metrics of the model's estimates on the labeled samples. Each sample is
/// routed through the encoder of its own domain unless `domain` overrides it.
pub fn evaluate(model: &ModelParams<f32>, samples: &[Sample], domain: Option<Domain>) -> Result<MetricsReport> {
    let labeled: Vec<Sample> = samples
        .iter()
        .filter(|s| s.label.is_some())
        .map(|s| Sample {
            domain: domain.unwrap_or(s.domain),
            ..s.clone()
        })
        .collect();
    if labeled.is_empty() {
        return Err(Error::Empty("labeled samples"));
    }
    let predictions = predict_counts(model, &labeled)?;
    let labels: Vec<u32> = labeled.iter().map(|s| s.label.expect("filtered")).collect();
    metrics(&predictions, &labels)
}

/// MAE of always predicting `mean`, the reference a trained model must beat.
pub fn constant_predictor_mae(mean: f64, samples: &[Sample]) -> Option<f64> {
    let labels: Vec<f64> = samples.iter().filter_map(|s| s.label.map(f64::from)).collect();
    (!labels.is_empty()).then(|| labels.iter().map(|l| (l - mean).abs()).sum::<f64>() / labels.len() as f64)
}

/// Writes `metrics.json` and `per_count.csv` into `dir`.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(report)?)?;
    fs::write(dir.join("per_count.csv"), report.per_count_csv())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationResult {
    pub source: Image,
    pub source_domain: Domain,
    pub target_domain: Domain,
    pub translated: Image,
    /// Estimate from the source latent.
    pub source_count_estimate: f64,
    /// Estimate after re-encoding the translation with the target encoder.
    pub translated_count_estimate: f64,
}

fn latent_tensor(rows: &Tensor<f32>) -> Tensor<f32> {
    Tensor::dense(rows.n, rows.features(), rows.data.clone())
}

/// Encodes with the source encoder, decodes with the target decoder. With
/// equal domains this is a plain reconstruction.
pub fn translate_many(
    model: &ModelParams<f32>,
    images: &[&Image],
    source: Domain,
    target: Domain,
) -> Result<Vec<TranslationResult>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let (mu, _) = model.encode_batch(chunk, source, &mut Mode::Eval)?;
        let src_counts = model.regress_batch(latent_tensor(&mu), &mut Mode::Eval)?;
        let decoded = model.decode_batch(latent_tensor(&mu), target, &mut Mode::Eval)?;
        let translated: Vec<Image> = (0..chunk.len())
            .map(|i| Image::from_pixels(128, 128, decoded.sample(i).to_vec()))
            .collect::<Result<_>>()?;
        let refs: Vec<&Image> = translated.iter().collect();
        let (mu2, _) = model.encode_batch(&refs, target, &mut Mode::Eval)?;
        let xl_counts = model.regress_batch(latent_tensor(&mu2), &mut Mode::Eval)?;
        for (i, img) in translated.into_iter().enumerate() {
            out.push(TranslationResult {
                source: chunk[i].clone(),
                source_domain: source,
                target_domain: target,
                translated: img,
                source_count_estimate: src_counts[i].max(0.0) as f64,
                translated_count_estimate: xl_counts[i].max(0.0) as f64,
            });
        }
    }
    Ok(out)
}

pub fn translate(model: &ModelParams<f32>, image: &Image, source: Domain, target: Domain) -> Result<TranslationResult> {
    Ok(translate_many(model, &[image], source, target)?.remove(0))
}

/// Writes `<id>.src.png` and `<id>.xlat.png` per translated sample, with any
/// `.png` suffix of the id dropped.
pub fn write_translations(results: &[TranslationResult], ids: &[String], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (r, id) in results.iter().zip(ids) {
        let stem = id.strip_suffix(".png").unwrap_or(id);
        r.source.save_png(dir.join(format!("{stem}.src.png")))?;
        r.translated.save_png(dir.join(format!("{stem}.xlat.png")))?;
    }
    Ok(())
}

/// CSV `id,domain,count,z0..z{d-1}` with evaluation-mode `mu` as the vector
/// and an empty count for unlabeled samples.
pub fn export_latents(model: &ModelParams<f32>, samples: &[Sample], path: &Path) -> Result<()> {
    let d = model.config.latent_dim;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "domain".to_string(), "count".to_string()];
    header.extend((0..d).map(|i| format!("z{i}")));
    w.write_record(&header)?;
    for s in samples {
        let (mu, _) = model.encode_batch(&[&s.image], s.domain, &mut Mode::Eval)?;
        let mut row = vec![
            s.id.clone(),
            s.domain.to_string(),
            s.label.map_or(String::new(), |l| l.to_string()),
        ];
        row.extend(mu.data.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}
