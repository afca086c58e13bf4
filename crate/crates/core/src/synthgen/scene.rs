use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{BackgroundSource, GeneratorConfig, OverlapPolicy, Range};
use crate::error::{Error, Result};
use crate::image::SIZE;

/// One elliptical cell. Coordinates are in pixels with the origin at the
/// top-left corner of the frame; pixel `(x, y)` has its center at
/// `(x + 0.5, y + 0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub center_x: f64,
    pub center_y: f64,
    /// Larger semi-axis.
    pub radius_a: f64,
    pub radius_b: f64,
    pub rotation: f64,
    pub interior_brightness: f64,
    pub membrane_brightness: f64,
    pub membrane_width: f64,
    pub blur_sigma: f64,
    /// Relative amplitude of the contour harmonics.
    pub deformation_amplitude: f64,
}

impl CellSpec {
    /// Bound on the distance from the center to the rendered contour.
    pub fn extent(&self) -> f64 {
        self.radius_a.max(self.radius_b) * (1.0 + self.deformation_amplitude)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub cells: Vec<CellSpec>,
    pub background_id: u32,
    pub background_brightness_scale: f64,
    pub noise_amplitude: f64,
    pub global_blur_sigma: f64,
    /// Faint shapes composited under the cells (pseudo-natural style only).
    pub smudges: Vec<CellSpec>,
    /// Contrast about mid-gray (1 for the plain style).
    pub contrast: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Ground-truth cell count.
    pub fn label(&self) -> usize {
        self.cells.len()
    }
}

/// Independent per-purpose stream for a seed.
pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng.next_u64()
}

fn sample_count<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (&k, &p) in &config.count_distribution {
        if p > 0.0 {
            acc += p;
            last = k;
            if u < acc {
                return k;
            }
        }
    }
    last
}

fn sample_geometry<R: Rng + ?Sized>(config: &GeneratorConfig, rng: &mut R) -> CellSpec {
    let a = config.radius_range.sample(rng);
    CellSpec {
        center_x: 0.0,
        center_y: 0.0,
        radius_a: a,
        radius_b: a * config.aspect_range.sample(rng),
        rotation: rng.random_range(0.0..PI),
        interior_brightness: config.interior_brightness.sample(rng),
        membrane_brightness: config.membrane_brightness.sample(rng),
        membrane_width: config.membrane_width.sample(rng),
        blur_sigma: config.cell_blur.sample(rng),
        deformation_amplitude: config.deformation.sample(rng),
    }
}

/// Whether two cells satisfy the overlap policy.
pub fn compatible(policy: OverlapPolicy, a: &CellSpec, b: &CellSpec) -> bool {
    let d = (a.center_x - b.center_x).hypot(a.center_y - b.center_y);
    let (ea, eb) = (a.extent(), b.extent());
    match policy {
        OverlapPolicy::Forbid { min_distance_factor } => d >= min_distance_factor * (ea + eb),
        OverlapPolicy::Allow { max_overlap_fraction } => ea + eb - d <= max_overlap_fraction * 2.0 * ea.min(eb),
    }
}

fn background_variants(config: &GeneratorConfig) -> u32 {
    match config.background {
        BackgroundSource::Procedural => config.background_bank_size,
        BackgroundSource::MeanOfImages { .. } => 1,
    }
}

/// Draws a scene: count from the configured histogram, geometry from the
/// configured ranges, positions by rejection sampling under the overlap
/// policy. Deterministic in `(config, seed)`.
pub fn sample_scene(config: &GeneratorConfig, seed: u64) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = stream(seed, 0);
    let count = sample_count(config, &mut rng) as usize;
    let margin = config.placement_margin;
    let mut cells: Vec<CellSpec> = Vec::with_capacity(count);
    let attempts = config.max_placement_attempts as usize;
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..attempts {
            let mut cell = sample_geometry(config, &mut rng);
            let lo = margin + cell.extent();
            let hi = SIZE as f64 - lo;
            cell.center_x = Range(lo, hi).sample(&mut rng);
            cell.center_y = Range(lo, hi).sample(&mut rng);
            if cells.iter().all(|c| compatible(config.overlap_policy, c, &cell)) {
                cells.push(cell);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                requested: count,
                placed: cells.len(),
                attempts,
            });
        }
    }

    let nat = config.style.is_pseudo_nat();
    let (lo, hi) = config.smudge_count;
    let n_smudges = if nat { rng.random_range(lo..=hi) } else { 0 };
    let smudges = (0..n_smudges)
        .map(|_| {
            let a = rng.random_range(12.0..30.0);
            let shade = rng.random_range(-0.12..0.12);
            CellSpec {
                center_x: rng.random_range(0.0..SIZE as f64),
                center_y: rng.random_range(0.0..SIZE as f64),
                radius_a: a,
                radius_b: a * rng.random_range(0.4..1.0),
                rotation: rng.random_range(0.0..PI),
                interior_brightness: shade,
                membrane_brightness: shade,
                membrane_width: 0.0,
                blur_sigma: rng.random_range(3.0..6.0),
                deformation_amplitude: rng.random_range(0.0..0.3),
            }
        })
        .collect();

    Ok(SceneSpec {
        cells,
        background_id: rng.random_range(0..background_variants(config)),
        background_brightness_scale: config.background_brightness_scale.sample(&mut rng),
        noise_amplitude: config.noise_amplitude.sample(&mut rng),
        global_blur_sigma: config.global_blur.sample(&mut rng),
        smudges,
        contrast: if nat { config.contrast.sample(&mut rng) } else { 1.0 },
        seed,
    })
}
