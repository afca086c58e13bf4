//! Dataset loading, augmentation and batching.

mod manifest;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{DatasetManifest, ManifestRow, MANIFEST_FILE, MAX_COUNT, SCENES_FILE};

use crate::domain::Domain;
use crate::error::{invalid, Error, Result};
use crate::image::{Image, SIZE};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: Option<u32>,
    pub domain: Domain,
    pub id: String,
}

/// A loaded manifest with its images in row order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labeled(&self) -> usize {
        self.samples.iter().filter(|s| s.label.is_some()).count()
    }
}

/// Reads `manifest.csv` and every PNG it names, validating each row.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let manifest = DatasetManifest::read(dir)?;
    let mut samples = Vec::with_capacity(manifest.len());
    for (i, row) in manifest.rows.iter().enumerate() {
        let path = manifest.image_path(row);
        let fail = |message: String| Error::Manifest {
            path: manifest.manifest_path(),
            row: i + 1,
            message,
        };
        if !path.is_file() {
            return Err(fail(format!("missing image {}", path.display())));
        }
        let image = Image::load_png(&path).map_err(|e| fail(format!("cannot read {}: {e}", path.display())))?;
        if !image.is_working_size() {
            return Err(fail(format!(
                "{} is {}x{}, expected {SIZE}x{SIZE}",
                row.filename,
                image.width(),
                image.height()
            )));
        }
        samples.push(Sample {
            image,
            label: row.count,
            domain: row.domain,
            id: row.filename.trim_end_matches(".png").to_string(),
        });
    }
    Ok(Dataset { manifest, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Side of the random crop as a fraction of 128 (floored to pixels).
    pub crop_scale: f64,
    pub rot90: bool,
    /// Half-width of the uniform additive noise.
    pub noise_amplitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            crop_scale: 0.9,
            rot90: true,
            noise_amplitude: 0.02,
        }
    }
}

impl AugmentConfig {
    /// Configuration under which [`augment`] returns its input unchanged.
    pub fn identity() -> Self {
        AugmentConfig {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            crop_scale: 1.0,
            rot90: false,
            noise_amplitude: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.crop_scale > 0.0 && self.crop_scale <= 1.0) {
            return Err(invalid(format!("crop_scale must be in (0, 1], got {}", self.crop_scale)));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude <= 1.0) {
            return Err(invalid(format!("noise_amplitude must be in [0, 1], got {}", self.noise_amplitude)));
        }
        Ok(())
    }

    pub fn crop_size(&self) -> usize {
        ((SIZE as f64 * self.crop_scale).floor() as usize).clamp(1, SIZE)
    }
}

/// Horizontal flip, vertical flip, random resized crop, random quarter turn,
/// uniform noise, clamp. Each random draw happens whether or not its step is
/// enabled, so the stream consumed per call is fixed.
pub fn augment<R: Rng + ?Sized>(image: &Image, config: &AugmentConfig, rng: &mut R) -> Image {
    let mut img = image.clone();
    if rng.random::<f64>() < config.hflip_prob {
        img = img.flip_horizontal();
    }
    if rng.random::<f64>() < config.vflip_prob {
        img = img.flip_vertical();
    }
    let cs = config.crop_size();
    let x0 = rng.random_range(0..=img.width() - cs);
    let y0 = rng.random_range(0..=img.height() - cs);
    if cs < img.width() || cs < img.height() {
        img = img.resized_crop(x0, y0, cs, cs, SIZE, SIZE);
    }
    let k = rng.random_range(0..4u32);
    if config.rot90 {
        img = img.rotate90(k);
    }
    let a = config.noise_amplitude as f32;
    if a > 0.0 {
        for p in img.pixels_mut() {
            *p += rng.random_range(-a..=a);
        }
    }
    img.clamp_unit();
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<Image>,
    pub labels: Vec<Option<u32>>,
    pub ids: Vec<String>,
    pub domain: Domain,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.images.len()
    }

    pub fn image_refs(&self) -> Vec<&Image> {
        self.images.iter().collect()
    }
}

/// Endless shuffled batches over a single-domain sample set. Each pass is a
/// fresh permutation; the last batch of a pass may be short. Augmentation
/// draws from a per-batch stream seeded off the shuffling generator.
pub struct BatchStream<'a> {
    samples: &'a [Sample],
    batch_size: usize,
    augment: Option<AugmentConfig>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    passes: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(samples: &'a [Sample], batch_size: usize, seed: u64, augment: Option<AugmentConfig>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("batch source"));
        }
        if batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        let domain = samples[0].domain;
        if let Some(s) = samples.iter().find(|s| s.domain != domain) {
            return Err(Error::InvalidInput(format!(
                "batches must share one domain; `{}` is {} but `{}` is {}",
                samples[0].id, domain, s.id, s.domain
            )));
        }
        if let Some(a) = &augment {
            a.validate()?;
        }
        Ok(BatchStream {
            samples,
            batch_size,
            augment,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            pos: 0,
            passes: 0,
        })
    }

    pub fn domain(&self) -> Domain {
        self.samples[0].domain
    }

    /// Number of completed or started passes.
    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn batches_per_pass(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size)
    }

    /// Whether the next batch starts a new pass.
    pub fn at_pass_boundary(&self) -> bool {
        self.pos >= self.order.len()
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.at_pass_boundary() {
            self.order = (0..self.samples.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.passes += 1;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut aug_rng = ChaCha8Rng::seed_from_u64(self.rng.next_u64());
        let mut batch = Batch {
            images: Vec::with_capacity(idx.len()),
            labels: Vec::with_capacity(idx.len()),
            ids: Vec::with_capacity(idx.len()),
            domain: self.domain(),
        };
        for &i in idx {
            let s = &self.samples[i];
            batch.images.push(match &self.augment {
                Some(cfg) => augment(&s.image, cfg, &mut aug_rng),
                None => s.image.clone(),
            });
            batch.labels.push(s.label);
            batch.ids.push(s.id.clone());
        }
        batch
    }
}

/// One shuffled pass over `samples` as batches.
pub fn make_batches(
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
    augment: Option<&AugmentConfig>,
) -> Result<Vec<Batch>> {
    let mut stream = BatchStream::new(samples, batch_size, seed, augment.cloned())?;
    Ok((0..stream.batches_per_pass()).map(|_| stream.next_batch()).collect())
}

/// Deterministic split into `(train, validation)` with
/// `round(fraction · n)` validation samples (at least one when `fraction > 0`
/// and `n > 1`).
pub fn split(samples: &[Sample], fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let mut k = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n > 1 {
        k = k.clamp(1, n - 1);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val: Vec<usize> = order[..k].to_vec();
    val.sort_unstable();
    let mut is_val = vec![false; n];
    val.iter().for_each(|&i| is_val[i] = true);
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        if is_val[i] {
            valid.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, valid)
}

/// Keeps labels on the first `keep` samples of a seeded permutation and
/// clears the rest.
pub fn strip_labels(samples: &mut [Sample], keep: usize, seed: u64) {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for &i in &order[keep.min(order.len())..] {
        samples[i].label = None;
    }
}
