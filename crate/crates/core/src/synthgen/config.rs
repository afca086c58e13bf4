use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{invalid, Error, Result};
use crate::image::SIZE;

/// Imaging modality and whether the texture-enriched stand-in for natural
/// data is rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Style {
    #[serde(rename = "syn-pc")]
    SynPc,
    #[serde(rename = "syn-bf")]
    SynBf,
    #[serde(rename = "pseudo-nat-pc")]
    PseudoNatPc,
    #[serde(rename = "pseudo-nat-bf")]
    PseudoNatBf,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::SynPc, Style::SynBf, Style::PseudoNatPc, Style::PseudoNatBf];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::SynPc => "syn-pc",
            Style::SynBf => "syn-bf",
            Style::PseudoNatPc => "pseudo-nat-pc",
            Style::PseudoNatBf => "pseudo-nat-bf",
        }
    }

    pub fn domain(self) -> Domain {
        if self.is_pseudo_nat() {
            Domain::Nat
        } else {
            Domain::Syn
        }
    }

    pub fn is_pseudo_nat(self) -> bool {
        matches!(self, Style::PseudoNatPc | Style::PseudoNatBf)
    }

    /// Phase contrast: bright membranes on a mid-gray chamber.
    pub fn is_phase_contrast(self) -> bool {
        matches!(self, Style::SynPc | Style::PseudoNatPc)
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Style::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown style `{s}`")))
    }
}

/// Closed interval `[lo, hi]` sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn fixed(v: f64) -> Self {
        Range(v, v)
    }

    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.0 && v <= self.1
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.1 > self.0 {
            rng.random_range(self.0..=self.1)
        } else {
            self.0
        }
    }

    fn check(&self, name: &str, lo: f64, hi: f64) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite() && self.0 <= self.1) {
            return Err(invalid(format!("{name}: need lo <= hi, got [{}, {}]", self.0, self.1)));
        }
        if self.0 < lo || self.1 > hi {
            return Err(invalid(format!("{name}: [{}, {}] outside [{lo}, {hi}]", self.0, self.1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum OverlapPolicy {
    /// Centers at least `min_distance_factor · (extent_i + extent_j)` apart,
    /// where the extent is a cell's larger semi-axis.
    Forbid { min_distance_factor: f64 },
    /// Pairwise overlap depth `extent_i + extent_j − d` at most this fraction
    /// of the smaller cell's diameter.
    Allow { max_overlap_fraction: f64 },
}

/// Where the chamber background comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BackgroundSource {
    /// Drawn chamber rectangle; `background_id` seeds the variant.
    #[default]
    Procedural,
    /// Per-pixel mean of the listed 128×128 PNGs (natural images with few
    /// cells).
    MeanOfImages { paths: Vec<std::path::PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub style: Style,
    /// Probability of each cell count (keys 0..=30); must sum to one.
    pub count_distribution: BTreeMap<u32, f64>,
    pub overlap_policy: OverlapPolicy,
    /// Larger semi-axis in pixels.
    pub radius_range: Range,
    /// Smaller over larger semi-axis.
    pub aspect_range: Range,
    pub interior_brightness: Range,
    pub membrane_brightness: Range,
    pub membrane_width: Range,
    pub cell_blur: Range,
    pub deformation: Range,
    pub global_blur: Range,
    pub noise_amplitude: Range,
    pub background_brightness_scale: Range,
    /// Pseudo-natural only: multiplicative contrast about mid-gray.
    pub contrast: Range,
    /// Pseudo-natural only: faint large shapes per image (inclusive bounds).
    pub smudge_count: (u32, u32),
    /// Minimum distance from the frame edge to any cell's outer extent, so a
    /// 115-pixel augmentation crop keeps every cell.
    pub placement_margin: f64,
    /// Procedural backgrounds cycle through this many variants.
    pub background_bank_size: u32,
    pub background: BackgroundSource,
    pub max_placement_attempts: u32,
    /// Fixed working resolution.
    pub resolution: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::preset(Style::SynPc)
    }
}

/// Truncated geometric distribution over `1..=30`, mode at one.
pub fn default_count_distribution() -> BTreeMap<u32, f64> {
    let q: f64 = 0.88;
    let total: f64 = (1..=30).map(|k| q.powi(k - 1)).sum();
    (1..=30u32).map(|k| (k, q.powi(k as i32 - 1) / total)).collect()
}

impl GeneratorConfig {
    pub fn preset(style: Style) -> Self {
        let pc = style.is_phase_contrast();
        let nat = style.is_pseudo_nat();
        GeneratorConfig {
            style,
            count_distribution: default_count_distribution(),
            overlap_policy: OverlapPolicy::Allow {
                max_overlap_fraction: 0.3,
            },
            radius_range: Range(4.0, 10.0),
            aspect_range: Range(0.7, 1.0),
            interior_brightness: if pc { Range(0.1, 0.3) } else { Range(0.7, 0.9) },
            membrane_brightness: if pc { Range(0.85, 1.0) } else { Range(0.0, 0.2) },
            membrane_width: Range(1.0, 2.0),
            cell_blur: Range(0.0, 1.5),
            deformation: if nat { Range(0.05, 0.2) } else { Range(0.0, 0.08) },
            global_blur: Range(0.0, 0.8),
            noise_amplitude: Range(0.0, 0.05),
            background_brightness_scale: if nat { Range(0.8, 1.2) } else { Range(0.9, 1.1) },
            contrast: if nat { Range(0.75, 1.25) } else { Range::fixed(1.0) },
            smudge_count: if nat { (1, 4) } else { (0, 0) },
            placement_margin: 13.0,
            background_bank_size: 8,
            background: BackgroundSource::Procedural,
            max_placement_attempts: 200,
            resolution: SIZE,
        }
    }

    /// Counts fixed to `count` with probability one.
    pub fn with_fixed_count(mut self, count: u32) -> Self {
        self.count_distribution = BTreeMap::from([(count, 1.0)]);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution != SIZE {
            return Err(invalid(format!("resolution must be {SIZE}, got {}", self.resolution)));
        }
        if self.count_distribution.is_empty() {
            return Err(invalid("count_distribution is empty"));
        }
        let mut total = 0.0;
        for (&k, &p) in &self.count_distribution {
            if k > 30 {
                return Err(invalid(format!("count_distribution has count {k} > 30")));
            }
            if !(p >= 0.0 && p.is_finite()) {
                return Err(invalid(format!("count_distribution[{k}] = {p} is not a probability")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("count_distribution sums to {total}, not 1")));
        }
        match self.overlap_policy {
            OverlapPolicy::Forbid { min_distance_factor } if !(min_distance_factor >= 0.0) => {
                return Err(invalid("min_distance_factor must be >= 0"));
            }
            OverlapPolicy::Allow { max_overlap_fraction } if !(0.0..=1.0).contains(&max_overlap_fraction) => {
                return Err(invalid("max_overlap_fraction must be in [0, 1]"));
            }
            _ => {}
        }
        if !(self.radius_range.lo() > 0.0) {
            return Err(invalid("radius_range must be > 0"));
        }
        self.radius_range.check("radius_range", 0.0, SIZE as f64 / 2.0)?;
        self.aspect_range.check("aspect_range", 0.05, 1.0)?;
        self.interior_brightness.check("interior_brightness", 0.0, 1.0)?;
        self.membrane_brightness.check("membrane_brightness", 0.0, 1.0)?;
        self.membrane_width.check("membrane_width", 0.0, SIZE as f64)?;
        self.cell_blur.check("cell_blur", 0.0, 10.0)?;
        self.deformation.check("deformation", 0.0, 1.0)?;
        self.global_blur.check("global_blur", 0.0, 10.0)?;
        self.noise_amplitude.check("noise_amplitude", 0.0, 1.0)?;
        self.background_brightness_scale
            .check("background_brightness_scale", 0.5, 1.5)?;
        self.contrast.check("contrast", 0.0, 4.0)?;
        if self.smudge_count.0 > self.smudge_count.1 {
            return Err(invalid("smudge_count: need lo <= hi"));
        }
        if !(self.placement_margin >= 0.0) {
            return Err(invalid("placement_margin must be >= 0"));
        }
        if self.background_bank_size == 0 {
            return Err(invalid("background_bank_size must be >= 1"));
        }
        if self.max_placement_attempts == 0 {
            return Err(invalid("max_placement_attempts must be >= 1"));
        }
        if let BackgroundSource::MeanOfImages { paths } = &self.background {
            if paths.is_empty() {
                return Err(invalid("background image list is empty"));
            }
        }
        let span = SIZE as f64 - 2.0 * (self.placement_margin + self.max_extent());
        if span < 0.0 {
            return Err(invalid("cells cannot fit inside the placement margin"));
        }
        Ok(())
    }

    /// Upper bound on a cell's outer extent from its center.
    pub fn max_extent(&self) -> f64 {
        self.radius_range.hi() * (1.0 + self.deformation.hi())
    }
}
