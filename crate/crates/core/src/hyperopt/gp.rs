use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::neldermead::minimize_bounded;
use crate::error::{invalid, Error, Result};

/// Smallest noise variance ever used.
pub const NOISE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Noise variance at the floor, for noiseless observations.
    Floor,
    /// Noise variance chosen with the other hyperparameters.
    Fitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpConfig {
    pub noise: NoiseModel,
    /// Random restarts of the likelihood search, besides the bounds' centre.
    pub restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            noise: NoiseModel::Fitted,
            restarts: 4,
            max_iterations: 400,
            seed: 0,
        }
    }
}

/// Squared-exponential kernel with one length scale per input dimension.
/// Targets are standardized internally; reported variances are in target
/// units.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub length_scales: Vec<f64>,
    /// Signal variance in standardized units.
    pub signal_variance: f64,
    /// Noise variance in standardized units, jitter included.
    pub noise_variance: f64,
    points: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn sq_dist(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum()
}

fn kernel(a: &[f64], b: &[f64], ls: &[f64], sf2: f64) -> f64 {
    sf2 * (-0.5 * sq_dist(a, b, ls)).exp()
}

/// Factorizes `K + noise·I`, escalating extra jitter until it succeeds.
fn factorize(points: &[Vec<f64>], ls: &[f64], sf2: f64, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = points.len();
    let base = DMatrix::from_fn(n, n, |i, j| kernel(&points[i], &points[j], ls, sf2));
    let mut jitter = 0.0;
    loop {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += noise + jitter;
        }
        if let Some(c) = Cholesky::new(k) {
            return Ok((c, noise + jitter));
        }
        jitter = if jitter == 0.0 { 1e-10 * sf2.max(1e-300) } else { jitter * 10.0 };
        if jitter > 1e-2 * sf2 {
            return Err(Error::DegenerateCovariance { jitter });
        }
    }
}

/// Negative log marginal likelihood of standardized targets.
fn nlml(points: &[Vec<f64>], y: &DVector<f64>, ls: &[f64], sf2: f64, noise: f64) -> f64 {
    match factorize(points, ls, sf2, noise) {
        Ok((c, _)) => {
            let alpha = c.solve(y);
            let log_det: f64 = c.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            0.5 * y.dot(&alpha) + log_det + 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln()
        }
        Err(_) => f64::INFINITY,
    }
}

impl GpModel {
    /// Fits hyperparameters by maximizing the marginal likelihood with
    /// multi-start Nelder–Mead in log space.
    pub fn fit(points: &[Vec<f64>], values: &[f64], config: &GpConfig) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("GP training points"));
        }
        if points.len() != values.len() {
            return Err(invalid("GP points and values differ in length"));
        }
        let d = points[0].len();
        if d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(invalid("GP points must share a positive dimension"));
        }
        if points.iter().flatten().chain(values).any(|v| !v.is_finite()) {
            return Err(invalid("GP inputs must be finite"));
        }
        let n = values.len() as f64;
        let y_mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n).sqrt();
        let y_scale = if sd > 1e-12 { sd } else { 1.0 };
        let y = DVector::from_iterator(values.len(), values.iter().map(|v| (v - y_mean) / y_scale));

        // Search box in log space: length scales relative to each input span.
        let mut lo = Vec::with_capacity(d + 2);
        let mut hi = Vec::with_capacity(d + 2);
        for k in 0..d {
            let (mn, mx) = points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[k]), b.max(p[k])));
            let span = if mx - mn > 1e-12 { mx - mn } else { 1.0 };
            lo.push((0.01 * span).ln());
            hi.push((10.0 * span).ln());
        }
        lo.push(1e-2f64.ln());
        hi.push(1e2f64.ln());
        let fit_noise = config.noise == NoiseModel::Fitted;
        if fit_noise {
            lo.push(NOISE_FLOOR.ln());
            hi.push(1.0f64.ln());
        }
        let unpack = |theta: &[f64]| -> (Vec<f64>, f64, f64) {
            let ls = theta[..d].iter().map(|t| t.exp()).collect();
            let sf2 = theta[d].exp();
            let noise = if fit_noise { theta[d + 1].exp() } else { NOISE_FLOOR };
            (ls, sf2, noise)
        };
        let objective = |theta: &[f64]| {
            let (ls, sf2, noise) = unpack(theta);
            nlml(points, &y, &ls, sf2, noise)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut starts = vec![lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<f64>>()];
        for _ in 0..config.restarts {
            starts.push(lo.iter().zip(&hi).map(|(&a, &b)| rng.random_range(a..=b)).collect());
        }
        let mut best: Option<(Vec<f64>, f64)> = None;
        for s in starts {
            let (theta, f) = minimize_bounded(&objective, &s, &lo, &hi, config.max_iterations);
            if f.is_finite() && best.as_ref().is_none_or(|b| f < b.1) {
                best = Some((theta, f));
            }
        }
        let (theta, _) = best.ok_or(Error::DegenerateCovariance { jitter: f64::INFINITY })?;
        let (ls, sf2, noise) = unpack(&theta);
        let (chol, noise) = factorize(points, &ls, sf2, noise)?;
        let alpha = chol.solve(&y);
        Ok(GpModel {
            length_scales: ls,
            signal_variance: sf2,
            noise_variance: noise,
            points: points.to_vec(),
            y_mean,
            y_scale,
            chol,
            alpha,
        })
    }

    /// Posterior mean and variance of the latent function, in target units.
    /// The variance is clamped at zero.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(
            self.points.len(),
            self.points.iter().map(|p| kernel(x, p, &self.length_scales, self.signal_variance)),
        );
        let mean = self.y_mean + self.y_scale * ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("cholesky factor has a positive diagonal");
        let var = (self.signal_variance - v.dot(&v)).max(0.0) * self.y_scale * self.y_scale;
        (mean, var)
    }

    /// Prior signal variance in target units.
    pub fn signal_variance_scaled(&self) -> f64 {
        self.signal_variance * self.y_scale * self.y_scale
    }

    /// Noise variance in target units.
    pub fn noise_variance_scaled(&self) -> f64 {
        self.noise_variance * self.y_scale * self.y_scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> GpConfig {
        GpConfig {
            noise: NoiseModel::Floor,
            ..Default::default()
        }
    }

    #[test]
    fn single_point_is_interpolated() {
        let gp = GpModel::fit(&[vec![0.4]], &[2.5], &noiseless()).unwrap();
        let (m, v) = gp.predict(&[0.4]);
        assert!((m - 2.5).abs() < 1e-9);
        assert!(v <= 1e-6);
    }

    #[test]
    fn duplicate_points_fit() {
        let pts = vec![vec![0.1, 0.2], vec![0.1, 0.2], vec![0.7, 0.9]];
        let gp = GpModel::fit(&pts, &[1.0, 1.0, 3.0], &noiseless()).unwrap();
        assert!(gp.predict(&[0.1, 0.2]).0.is_finite());
    }

    #[test]
    fn smooth_function_is_recovered() {
        let tau = std::f64::consts::TAU;
        let pts: Vec<Vec<f64>> = (0..8).map(|i| vec![tau * i as f64 / 7.0]).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p[0].sin()).collect();
        let gp = GpModel::fit(&pts, &ys, &noiseless()).unwrap();
        for k in 0..7 {
            let x = tau * (k as f64 + 0.5) / 7.0;
            assert!((gp.predict(&[x]).0 - x.sin()).abs() < 0.1, "at {x}");
        }
    }

    #[test]
    fn variance_reverts_far_away() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.25]).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p[0] * p[0]).collect();
        let gp = GpModel::fit(&pts, &ys, &noiseless()).unwrap();
        let far = 1e3 * gp.length_scales[0];
        let (_, v) = gp.predict(&[far]);
        assert!((v - gp.signal_variance_scaled()).abs() <= 0.05 * gp.signal_variance_scaled());
    }
}
