//! Classical counting baseline: crop, mean blur, threshold, distance-map
//! watershed, region count, and an exhaustive grid search over its knobs.

mod segment;

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use segment::{distance_transform, drop_small_regions, fill_holes, label_components, peak_markers, watershed, Mask};

use crate::dataio::Sample;
use crate::error::{invalid, Error, Result};
use crate::evaluation::{metrics, MetricsReport};
use crate::image::{Image, SIZE};
use crate::synthgen::Style;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    CellsDark,
    CellsBright,
}

impl std::fmt::Display for Polarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Polarity::CellsDark => "cells-dark",
            Polarity::CellsBright => "cells-bright",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatershedParams {
    pub crop_margin: usize,
    /// Side of the square mean filter; odd.
    pub blur_kernel: usize,
    pub threshold: f64,
    pub polarity: Polarity,
    /// Minimum Chebyshev separation of watershed markers, in pixels.
    pub distance_peak_min: usize,
    pub min_region_area: usize,
    /// Fill enclosed background before the distance transform, so ring-shaped
    /// cells become solid blobs.
    pub fill_holes: bool,
}

impl WatershedParams {
    pub fn validate(&self) -> Result<()> {
        if self.blur_kernel == 0 || self.blur_kernel % 2 == 0 {
            return Err(invalid(format!("blur_kernel must be odd and >= 1, got {}", self.blur_kernel)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(invalid(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        if 2 * self.crop_margin >= SIZE {
            return Err(invalid(format!("crop_margin {} leaves no image", self.crop_margin)));
        }
        Ok(())
    }

    /// Calibrated defaults for a synthetic style.
    pub fn calibrated(style: Style) -> Self {
        if style.is_phase_contrast() {
            WatershedParams {
                crop_margin: 12,
                blur_kernel: 1,
                threshold: 0.6,
                polarity: Polarity::CellsBright,
                distance_peak_min: 4,
                min_region_area: 6,
                fill_holes: true,
            }
        } else {
            WatershedParams {
                crop_margin: 12,
                blur_kernel: 1,
                threshold: 0.5,
                polarity: Polarity::CellsDark,
                distance_peak_min: 4,
                min_region_area: 6,
                fill_holes: true,
            }
        }
    }

    /// Ordering used to break exact ties in the grid search.
    fn lexicographic(&self, other: &Self) -> Ordering {
        (self.crop_margin, self.blur_kernel)
            .cmp(&(other.crop_margin, other.blur_kernel))
            .then(self.threshold.total_cmp(&other.threshold))
            .then(self.polarity.cmp(&other.polarity))
            .then(self.distance_peak_min.cmp(&other.distance_peak_min))
            .then(self.min_region_area.cmp(&other.min_region_area))
            .then(self.fill_holes.cmp(&other.fill_holes))
    }
}

/// Region labels over the cropped frame; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub regions: usize,
}

/// The foreground mask after crop, blur and threshold (and hole filling).
pub fn foreground(image: &Image, params: &WatershedParams) -> Mask {
    let m = params.crop_margin;
    let (w, h) = (image.width() - 2 * m, image.height() - 2 * m);
    let blurred = image.crop(m, m, w, h).box_blur(params.blur_kernel);
    let t = params.threshold as f32;
    let bits = blurred
        .pixels()
        .iter()
        .map(|&p| match params.polarity {
            Polarity::CellsBright => p >= t,
            Polarity::CellsDark => p <= t,
        })
        .collect();
    let mask = Mask::new(w, h, bits);
    if params.fill_holes {
        fill_holes(&mask)
    } else {
        mask
    }
}

pub fn segment(image: &Image, params: &WatershedParams) -> Segmentation {
    let mask = foreground(image, params);
    let dist = distance_transform(&mask);
    let markers = peak_markers(&mask, &dist, params.distance_peak_min);
    let mut labels = watershed(&mask, &dist, &markers);
    let regions = drop_small_regions(&mut labels, params.min_region_area);
    Segmentation {
        width: mask.width,
        height: mask.height,
        labels,
        regions,
    }
}

pub fn count(image: &Image, params: &WatershedParams) -> usize {
    segment(image, params).regions
}

/// Candidate values per parameter. Points are enumerated with the last field
/// varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub crop_margin: Vec<usize>,
    pub blur_kernel: Vec<usize>,
    pub threshold: Vec<f64>,
    pub polarity: Vec<Polarity>,
    pub distance_peak_min: Vec<usize>,
    pub min_region_area: Vec<usize>,
    pub fill_holes: Vec<bool>,
}

impl GridSpec {
    pub fn single(p: &WatershedParams) -> Self {
        GridSpec {
            crop_margin: vec![p.crop_margin],
            blur_kernel: vec![p.blur_kernel],
            threshold: vec![p.threshold],
            polarity: vec![p.polarity],
            distance_peak_min: vec![p.distance_peak_min],
            min_region_area: vec![p.min_region_area],
            fill_holes: vec![p.fill_holes],
        }
    }

    /// Default search grid for a style, bracketing its calibrated defaults.
    pub fn default_for(style: Style) -> Self {
        let c = WatershedParams::calibrated(style);
        let thresholds = if style.is_phase_contrast() {
            vec![0.5, 0.55, 0.6, 0.65, 0.7]
        } else {
            vec![0.4, 0.45, 0.5, 0.55, 0.6]
        };
        GridSpec {
            crop_margin: vec![c.crop_margin],
            blur_kernel: vec![1, 3],
            threshold: thresholds,
            polarity: vec![c.polarity],
            distance_peak_min: vec![3, 4, 6, 8],
            min_region_area: vec![3, 6, 12],
            fill_holes: vec![true],
        }
    }

    pub fn size(&self) -> usize {
        self.crop_margin.len()
            * self.blur_kernel.len()
            * self.threshold.len()
            * self.polarity.len()
            * self.distance_peak_min.len()
            * self.min_region_area.len()
            * self.fill_holes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size() == 0 {
            return Err(invalid("every grid parameter needs at least one candidate"));
        }
        for p in self.points() {
            p.validate()?;
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<WatershedParams> {
        let mut out = Vec::with_capacity(self.size());
        for &crop_margin in &self.crop_margin {
            for &blur_kernel in &self.blur_kernel {
                for &threshold in &self.threshold {
                    for &polarity in &self.polarity {
                        for &distance_peak_min in &self.distance_peak_min {
                            for &min_region_area in &self.min_region_area {
                                for &fill_holes in &self.fill_holes {
                                    out.push(WatershedParams {
                                        crop_margin,
                                        blur_kernel,
                                        threshold,
                                        polarity,
                                        distance_peak_min,
                                        min_region_area,
                                        fill_holes,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub params: WatershedParams,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// One row per grid point, in enumeration order.
    pub rows: Vec<GridRow>,
    pub best: usize,
}

impl GridResult {
    pub fn best(&self) -> &GridRow {
        &self.rows[self.best]
    }

    /// CSV `crop_margin,...,fill_holes,mae,mre,acc`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "crop_margin,blur_kernel,threshold,polarity,distance_peak_min,min_region_area,fill_holes,mae,mre,acc\n",
        );
        for r in &self.rows {
            let p = &r.params;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                p.crop_margin,
                p.blur_kernel,
                p.threshold,
                p.polarity,
                p.distance_peak_min,
                p.min_region_area,
                p.fill_holes,
                r.report.mae,
                r.report.mre,
                r.report.accuracy
            ));
        }
        s
    }

    /// Writes `grid.csv` and `best.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("grid.csv"), self.to_csv())?;
        fs::write(dir.join("best.json"), serde_json::to_vec_pretty(self.best())?)?;
        Ok(())
    }
}

/// Metrics of one parameter set over labeled samples.
pub fn score(samples: &[Sample], params: &WatershedParams) -> Result<MetricsReport> {
    let labeled: Vec<&Sample> = samples.iter().filter(|s| s.label.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Empty("labeled samples"));
    }
    let predictions: Vec<f64> = labeled.iter().map(|s| count(&s.image, params) as f64).collect();
    let labels: Vec<u32> = labeled.iter().map(|s| s.label.expect("filtered")).collect();
    metrics(&predictions, &labels)
}

/// Evaluates every grid point and picks the lowest MAE, then the highest
/// accuracy, then the lexicographically smallest parameters.
pub fn grid_search(samples: &[Sample], grid: &GridSpec) -> Result<GridResult> {
    grid.validate()?;
    if !samples.iter().any(|s| s.label.is_some()) {
        return Err(Error::Empty("labeled samples"));
    }
    let rows: Vec<GridRow> = grid
        .points()
        .into_par_iter()
        .map(|params| Ok(GridRow { report: score(samples, &params)?, params }))
        .collect::<Result<_>>()?;
    let best = (0..rows.len())
        .min_by(|&a, &b| {
            let (ra, rb) = (&rows[a], &rows[b]);
            ra.report
                .mae
                .total_cmp(&rb.report.mae)
                .then(rb.report.accuracy.total_cmp(&ra.report.accuracy))
                .then(ra.params.lexicographic(&rb.params))
        })
        .expect("grid is non-empty");
    Ok(GridResult { rows, best })
}
