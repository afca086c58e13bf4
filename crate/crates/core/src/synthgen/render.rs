use std::path::Path;

use rand::Rng;

use super::config::{BackgroundSource, GeneratorConfig, Style};
use super::scene::{stream, CellSpec, SceneSpec};
use crate::error::{Error, Result};
use crate::image::{Image, SIZE};

/// Width of the dark band the procedural chamber leaves along each edge.
pub const BORDER_BAND: usize = 6;
const CELL_STREAM: u64 = 1 << 32;
const NOISE_STREAM: u64 = 1;
const BACKGROUND_SEED: u64 = 0x6368_616d_6265_72;

/// Procedural chamber: dark border band, a slightly lighter wall line, and a
/// mildly graded interior. The pseudo-natural variants add faint
/// low-frequency texture.
pub fn procedural_background(style: Style, id: u32) -> Image {
    let mut rng = stream(BACKGROUND_SEED ^ id as u64, style as u64);
    let base = if style.is_phase_contrast() { 0.45 } else { 0.62 } + rng.random_range(-0.03..0.03);
    let band = BORDER_BAND + rng.random_range(0..=3usize);
    let (gx, gy) = (rng.random_range(-0.06..0.06), rng.random_range(-0.06..0.06));
    let waves: Vec<(f64, f64, f64)> = if style.is_pseudo_nat() {
        (0..3)
            .map(|_| {
                (
                    rng.random_range(-0.15..0.15),
                    rng.random_range(-0.15..0.15),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let border = base * 0.35;
    let wall = base * 0.7;
    Image::from_fn(SIZE, SIZE, |x, y| {
        let edge = x.min(y).min(SIZE - 1 - x).min(SIZE - 1 - y);
        let v = if edge < band {
            border
        } else if edge == band {
            wall
        } else {
            let (fx, fy) = (x as f64 / (SIZE - 1) as f64 - 0.5, y as f64 / (SIZE - 1) as f64 - 0.5);
            let texture: f64 = waves
                .iter()
                .map(|&(kx, ky, ph)| 0.015 * (kx * x as f64 + ky * y as f64 + ph).sin())
                .sum();
            base + gx * fx + gy * fy + texture
        };
        v.clamp(0.0, 1.0) as f32
    })
}

/// Per-pixel mean of the given images; errors on an empty list or a size
/// mismatch.
pub fn mean_background(images: &[Image]) -> Result<Image> {
    for img in images {
        img.ensure_working_size()?;
    }
    Image::mean_of(images)
}

/// Background for one id under `config`'s source.
pub fn build_background(config: &GeneratorConfig, id: u32) -> Result<Image> {
    match &config.background {
        BackgroundSource::Procedural => Ok(procedural_background(config.style, id)),
        BackgroundSource::MeanOfImages { paths } => load_mean_background(paths),
    }
}

fn load_mean_background(paths: &[impl AsRef<Path>]) -> Result<Image> {
    if paths.is_empty() {
        return Err(Error::Empty("background image list"));
    }
    let images = paths.iter().map(Image::load_png).collect::<Result<Vec<_>>>()?;
    mean_background(&images)
}

/// Contour harmonics `(k, coefficient, phase)` for cell `index` of a scene;
/// coefficients have unit absolute sum.
fn harmonics(seed: u64, index: u64) -> Vec<(f64, f64, f64)> {
    let mut rng = stream(seed, CELL_STREAM + index);
    let raw: Vec<(f64, f64, f64)> = (2..=5)
        .map(|k| {
            (
                k as f64,
                rng.random_range(-1.0..1.0) / k as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let norm: f64 = raw.iter().map(|h| h.1.abs()).sum::<f64>().max(1e-12);
    raw.into_iter().map(|(k, c, p)| (k, c / norm, p)).collect()
}

/// Small interior spots `(dx, dy, radius, delta)` in the cell frame.
fn organelles(seed: u64, index: u64, cell: &CellSpec) -> Vec<(f64, f64, f64, f64)> {
    let mut rng = stream(seed, CELL_STREAM + (1 << 16) + index);
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let rad = rng.random_range(0.0..0.45) * cell.radius_b;
            (
                rad * ang.cos(),
                rad * ang.sin(),
                rng.random_range(0.8..1.8),
                rng.random_range(-0.15..0.15),
            )
        })
        .collect()
}

/// Premultiplied value and coverage of one cell over a patch, before blur.
struct Layer {
    x0: usize,
    y0: usize,
    value: Image,
    alpha: Image,
}

fn rasterize(cell: &CellSpec, harm: &[(f64, f64, f64)], spots: &[(f64, f64, f64, f64)]) -> Option<Layer> {
    let reach = cell.extent() + 3.0 * cell.blur_sigma + 2.0;
    let x0 = (cell.center_x - reach).floor().max(0.0) as usize;
    let y0 = (cell.center_y - reach).floor().max(0.0) as usize;
    let x1 = ((cell.center_x + reach).ceil() as usize).min(SIZE);
    let y1 = ((cell.center_y + reach).ceil() as usize).min(SIZE);
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    let (w, h) = (x1 - x0, y1 - y0);
    let (sin, cos) = cell.rotation.sin_cos();
    let (a, b) = (cell.radius_a, cell.radius_b);
    let mut value = Image::filled(w, h, 0.0);
    let mut alpha = Image::filled(w, h, 0.0);
    for py in 0..h {
        for px in 0..w {
            let dx = (x0 + px) as f64 + 0.5 - cell.center_x;
            let dy = (y0 + py) as f64 + 0.5 - cell.center_y;
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let dist = u.hypot(v);
            let phi = v.atan2(u);
            let ellipse = a * b / ((b * phi.cos()).powi(2) + (a * phi.sin()).powi(2)).sqrt();
            let wobble: f64 = harm.iter().map(|&(k, c, p)| c * (k * phi + p).cos()).sum();
            let r = ellipse * (1.0 + cell.deformation_amplitude * wobble);
            let cover = (r - dist + 0.5).clamp(0.0, 1.0);
            if cover <= 0.0 {
                continue;
            }
            let t = (dist - (r - cell.membrane_width) + 0.5).clamp(0.0, 1.0);
            let mut shade = cell.interior_brightness * (1.0 - t) + cell.membrane_brightness * t;
            for &(sx, sy, sr, delta) in spots {
                let d = (u - sx).hypot(v - sy);
                shade += delta * (sr - d + 0.5).clamp(0.0, 1.0) * (1.0 - t);
            }
            value.set(px, py, (shade.clamp(0.0, 1.0) * cover) as f32);
            alpha.set(px, py, cover as f32);
        }
    }
    let sigma = cell.blur_sigma as f32;
    Some(Layer {
        x0,
        y0,
        value: value.gaussian_blur(sigma),
        alpha: alpha.gaussian_blur(sigma),
    })
}

/// Renders `scene` over `background`. Every step is a deterministic function
/// of the scene, so re-rendering is bit-identical.
pub fn render_with_background(scene: &SceneSpec, style: Style, background: &Image) -> Result<Image> {
    background.ensure_working_size()?;
    let scale = scene.background_brightness_scale as f32;
    let mut out: Vec<f32> = background.pixels().iter().map(|&p| (p * scale).clamp(0.0, 1.0)).collect();

    for (i, smudge) in scene.smudges.iter().enumerate() {
        let harm = harmonics(scene.seed, (1 << 20) + i as u64);
        let flat = CellSpec {
            interior_brightness: 1.0,
            membrane_brightness: 1.0,
            ..smudge.clone()
        };
        if let Some(layer) = rasterize(&flat, &harm, &[]) {
            let shade = smudge.interior_brightness as f32;
            for py in 0..layer.alpha.height() {
                for px in 0..layer.alpha.width() {
                    let idx = (layer.y0 + py) * SIZE + layer.x0 + px;
                    out[idx] += shade * layer.alpha.get(px, py);
                }
            }
        }
    }

    for (i, cell) in scene.cells.iter().enumerate() {
        let harm = harmonics(scene.seed, i as u64);
        let spots = if style.is_pseudo_nat() {
            organelles(scene.seed, i as u64, cell)
        } else {
            Vec::new()
        };
        if let Some(layer) = rasterize(cell, &harm, &spots) {
            for py in 0..layer.alpha.height() {
                for px in 0..layer.alpha.width() {
                    let idx = (layer.y0 + py) * SIZE + layer.x0 + px;
                    let al = layer.alpha.get(px, py);
                    out[idx] = layer.value.get(px, py) + (1.0 - al) * out[idx];
                }
            }
        }
    }

    let mut img = Image::from_pixels(SIZE, SIZE, out)?.gaussian_blur(scene.global_blur_sigma as f32);
    let contrast = scene.contrast as f32;
    let amp = scene.noise_amplitude as f32;
    let mut rng = stream(scene.seed, NOISE_STREAM);
    for p in img.pixels_mut() {
        let mut v = if contrast == 1.0 { *p } else { 0.5 + (*p - 0.5) * contrast };
        if amp > 0.0 {
            v += rng.random_range(-amp..=amp);
        }
        *p = v;
    }
    img.clamp_unit();
    Ok(img)
}

/// Renders `scene`, building its background from `config`.
pub fn render(scene: &SceneSpec, config: &GeneratorConfig) -> Result<Image> {
    let bg = build_background(config, scene.background_id)?;
    render_with_background(scene, config.style, &bg)
}
