//! Seeded synthetic cell images.
//!
//! A [`SceneSpec`] fully describes one image; [`render`] turns it into
//! pixels deterministically. [`generate_dataset`] derives an independent
//! seed per sample from `(seed, index)`, so samples are produced in parallel
//! with output identical to a sequential run.

mod config;
mod render;
mod scene;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

pub use config::{default_count_distribution, BackgroundSource, GeneratorConfig, OverlapPolicy, Range, Style};
pub use render::{
    build_background, mean_background, procedural_background, render, render_with_background, BORDER_BAND,
};
pub use scene::{compatible, derive_seed, sample_scene, CellSpec, SceneSpec};

use crate::dataio::{DatasetManifest, ManifestRow, Sample, SCENES_FILE};
use crate::error::{invalid, Result};
use crate::image::Image;

/// A validated config with its background bank built once.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    bank: Vec<Image>,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let bank = match &config.background {
            BackgroundSource::Procedural => (0..config.background_bank_size)
                .map(|id| procedural_background(config.style, id))
                .collect(),
            BackgroundSource::MeanOfImages { .. } => vec![build_background(&config, 0)?],
        };
        Ok(Generator { config, bank })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn background(&self, id: u32) -> Result<&Image> {
        self.bank
            .get(id as usize)
            .ok_or_else(|| invalid(format!("background_id {id} outside bank of {}", self.bank.len())))
    }

    pub fn sample(&self, seed: u64) -> Result<SceneSpec> {
        sample_scene(&self.config, seed)
    }

    pub fn render(&self, scene: &SceneSpec) -> Result<Image> {
        render_with_background(scene, self.config.style, self.background(scene.background_id)?)
    }

    /// Scene and image for sample `index` of a dataset seeded with `seed`.
    pub fn sample_at(&self, seed: u64, index: u64) -> Result<(SceneSpec, Image)> {
        let scene = self.sample(derive_seed(seed, index))?;
        let image = self.render(&scene)?;
        Ok((scene, image))
    }
}

pub fn sample_filename(index: usize) -> String {
    format!("img_{index:05}.png")
}

/// Writes `n` PNGs, `manifest.csv` and `scenes.json` into `out_dir`.
/// Labels must be at least one, so distributions with mass on zero cells are
/// rejected here.
pub fn generate_dataset(config: &GeneratorConfig, n: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(invalid("n must be > 0"));
    }
    if config.count_distribution.get(&0).is_some_and(|&p| p > 0.0) {
        return Err(invalid("datasets need labels >= 1; count_distribution puts mass on 0"));
    }
    let generator = Generator::new(config.clone())?;
    fs::create_dir_all(out_dir)?;
    let domain = config.style.domain();
    let produced: Vec<(ManifestRow, SceneSpec)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (scene, image) = generator.sample_at(seed, i as u64)?;
            let filename = sample_filename(i);
            image.save_png(out_dir.join(&filename))?;
            let row = ManifestRow {
                filename,
                count: Some(scene.label() as u32),
                domain,
                seed: Some(scene.seed),
            };
            Ok((row, scene))
        })
        .collect::<Result<_>>()?;
    let mut scenes = BTreeMap::new();
    let mut rows = Vec::with_capacity(n);
    for (row, scene) in produced {
        scenes.insert(row.filename.clone(), scene);
        rows.push(row);
    }
    let manifest = DatasetManifest::new(out_dir, rows);
    manifest.write()?;
    fs::write(out_dir.join(SCENES_FILE), serde_json::to_vec_pretty(&scenes)?)?;
    Ok(manifest)
}

/// In-memory counterpart of [`generate_dataset`]: the same images and labels,
/// with pixels quantized to 8 bits as a PNG round trip would.
pub fn generate_samples(config: &GeneratorConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let generator = Generator::new(config.clone())?;
    let domain = config.style.domain();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (scene, image) = generator.sample_at(seed, i as u64)?;
            Ok(Sample {
                image: image.quantized(),
                label: Some(scene.label() as u32),
                domain,
                id: sample_filename(i),
            })
        })
        .collect()
}

/// The retained scene specs of a generated dataset, keyed by filename.
pub fn load_scenes(dir: &Path) -> Result<BTreeMap<String, SceneSpec>> {
    Ok(serde_json::from_slice(&fs::read(dir.join(SCENES_FILE))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_distribution_fixes_the_count() {
        let config = GeneratorConfig::default().with_fixed_count(1);
        for seed in 0..20 {
            assert_eq!(sample_scene(&config, seed).unwrap().label(), 1);
        }
    }

    #[test]
    fn scenes_are_deterministic() {
        for style in Style::ALL {
            let config = GeneratorConfig::preset(style);
            let a = sample_scene(&config, 42).unwrap();
            assert_eq!(a, sample_scene(&config, 42).unwrap());
            let g = Generator::new(config.clone()).unwrap();
            assert_eq!(g.render(&a).unwrap(), g.render(&a).unwrap());
            assert_eq!(g.render(&a).unwrap(), render(&a, &config).unwrap());
        }
    }

    #[test]
    fn empty_scene_renders_the_background() {
        let config = GeneratorConfig::default();
        let mut scene = sample_scene(&config.clone().with_fixed_count(0), 3).unwrap();
        scene.noise_amplitude = 0.0;
        scene.background_brightness_scale = 1.0;
        scene.global_blur_sigma = 0.0;
        let bg = build_background(&config, scene.background_id).unwrap();
        assert_eq!(render(&scene, &config).unwrap(), bg);
    }

    #[test]
    fn procedural_border_is_darker_than_interior() {
        for style in Style::ALL {
            for id in 0..4 {
                let bg = procedural_background(style, id);
                assert!(bg.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
                let mut border = f32::MAX;
                let mut interior = f32::MAX;
                for y in 0..128 {
                    for x in 0..128 {
                        let edge = x.min(y).min(127 - x).min(127 - y);
                        if edge < BORDER_BAND {
                            border = border.min(bg.get(x, y));
                        } else if edge >= 16 {
                            interior = interior.min(bg.get(x, y));
                        }
                    }
                }
                assert!(border < interior, "{style} {id}");
            }
        }
    }

    #[test]
    fn mean_background_is_pixelwise_mean() {
        let a = Image::constant(0.2);
        let b = Image::constant(0.4);
        let m = mean_background(&[a.clone(), b]).unwrap();
        assert!(m.pixels().iter().all(|&p| (p - 0.3).abs() < 1e-6));
        assert_eq!(mean_background(&[a.clone(), a.clone()]).unwrap(), a);
        assert!(mean_background(&[]).is_err());
    }

    #[test]
    fn bright_cell_changes_its_center_pixel() {
        let config = GeneratorConfig::default().with_fixed_count(1);
        let g = Generator::new(config).unwrap();
        let mut scene = g.sample(5).unwrap();
        let cell = &mut scene.cells[0];
        cell.interior_brightness = 1.0;
        cell.membrane_brightness = 1.0;
        let (cx, cy) = (cell.center_x as usize, cell.center_y as usize);
        let bg = g.background(scene.background_id).unwrap().clone();
        let img = g.render(&scene).unwrap();
        let scale = scene.background_brightness_scale as f32;
        let diff = (img.get(cx, cy) - (bg.get(cx, cy) * scale).min(1.0)).abs();
        assert!(diff > scene.noise_amplitude as f32, "diff {diff}");
    }

    #[test]
    fn forbidden_overlap_holds_or_fails_loudly() {
        let mut config = GeneratorConfig::default().with_fixed_count(30);
        config.overlap_policy = OverlapPolicy::Forbid {
            min_distance_factor: 1.0,
        };
        config.radius_range = Range(9.0, 10.0);
        config.deformation = Range::fixed(0.0);
        for seed in 0..5 {
            match sample_scene(&config, seed) {
                Ok(scene) => {
                    for (i, a) in scene.cells.iter().enumerate() {
                        for b in &scene.cells[i + 1..] {
                            let d = (a.center_x - b.center_x).hypot(a.center_y - b.center_y);
                            assert!(d >= a.extent() + b.extent());
                        }
                    }
                }
                Err(e) => assert!(matches!(e, crate::error::Error::Placement { .. })),
            }
        }
    }
}
