use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::nn::{Scalar, Tensor};

/// Lower/upper clamp applied to reconstructions inside the BCE.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecKind {
    Mse,
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// `w · (1 − rate)^epoch`
    Multiplicative,
    /// `w · max(0, 1 − rate · epoch)`
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainWeights {
    pub w_rec: f64,
    pub w_regr: f64,
    pub w_kld: f64,
}

impl Default for DomainWeights {
    fn default() -> Self {
        DomainWeights {
            w_rec: 100.0,
            w_regr: 3.0,
            w_kld: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub nat: DomainWeights,
    pub syn: DomainWeights,
    pub rec_kind: RecKind,
    /// Per-epoch decay of the reconstruction weight, BCE only.
    pub bce_decay_rate: f64,
    pub bce_decay: DecayMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            nat: DomainWeights::default(),
            syn: DomainWeights::default(),
            rec_kind: RecKind::Mse,
            bce_decay_rate: 3e-5,
            bce_decay: DecayMode::Multiplicative,
        }
    }
}

impl LossWeights {
    pub fn uniform(w_rec: f64, w_regr: f64, w_kld: f64) -> Self {
        let d = DomainWeights { w_rec, w_regr, w_kld };
        LossWeights {
            nat: d,
            syn: d,
            ..Default::default()
        }
    }

    pub fn domain(&self, domain: Domain) -> &DomainWeights {
        match domain {
            Domain::Nat => &self.nat,
            Domain::Syn => &self.syn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("nat", &self.nat), ("syn", &self.syn)] {
            for (w, v) in [("w_rec", d.w_rec), ("w_regr", d.w_regr), ("w_kld", d.w_kld)] {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(invalid(format!("{name}.{w} must be finite and >= 0, got {v}")));
                }
            }
        }
        if !(0.0..1.0).contains(&self.bce_decay_rate) {
            return Err(invalid(format!("bce_decay_rate must be in [0, 1), got {}", self.bce_decay_rate)));
        }
        Ok(())
    }

    /// Reconstruction weight in effect at `epoch`.
    pub fn effective_rec(&self, domain: Domain, epoch: usize) -> f64 {
        let w = self.domain(domain).w_rec;
        match self.rec_kind {
            RecKind::Mse => w,
            RecKind::Bce => match self.bce_decay {
                DecayMode::Multiplicative => w * (1.0 - self.bce_decay_rate).powf(epoch as f64),
                DecayMode::Additive => w * (1.0 - self.bce_decay_rate * epoch as f64).max(0.0),
            },
        }
    }
}

fn check_same(x: &Image, r: &Image) -> Result<()> {
    if x.width() != r.width() || x.height() != r.height() {
        return Err(Error::Shape(format!(
            "image {}x{} vs reconstruction {}x{}",
            x.width(),
            x.height(),
            r.width(),
            r.height()
        )));
    }
    Ok(())
}

/// Mean over pixels of `(x − r)²`.
pub fn mse_loss(x: &Image, recon: &Image) -> Result<f64> {
    check_same(x, recon)?;
    let n = x.pixels().len() as f64;
    Ok(x.pixels()
        .iter()
        .zip(recon.pixels())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n)
}

fn bce_term(x: f64, r: f64) -> f64 {
    let r = r.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(x * r.ln() + (1.0 - x) * (1.0 - r).ln())
}

/// Mean over pixels of the binary cross entropy with `r` clamped away from
/// 0 and 1.
pub fn bce_loss(x: &Image, recon: &Image) -> Result<f64> {
    check_same(x, recon)?;
    let n = x.pixels().len() as f64;
    Ok(x.pixels()
        .iter()
        .zip(recon.pixels())
        .map(|(&a, &b)| bce_term(a as f64, b as f64))
        .sum::<f64>()
        / n)
}

/// KL divergence of `N(mu, exp(logvar))` from the standard normal, summed
/// over dimensions.
pub fn kld_loss(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

pub fn regr_loss(estimate: f64, label: f64) -> f64 {
    (estimate - label).powi(2)
}

/// Reconstruction loss of a batch (per-image pixel mean, averaged over the
/// batch) and its gradient w.r.t. the reconstruction.
pub fn rec_batch<T: Scalar>(kind: RecKind, x: &Tensor<T>, recon: &Tensor<T>, scale: f64) -> (f64, Tensor<T>) {
    assert!(x.same_shape(recon), "reconstruction shape");
    let count = x.data.len() as f64;
    let mut grad = recon.clone();
    let mut total = 0.0;
    for ((g, &xv), &rv) in grad.data.iter_mut().zip(&x.data).zip(&recon.data) {
        let (xf, rf) = (xv.as_f64(), rv.as_f64());
        let d = match kind {
            RecKind::Mse => {
                total += (rf - xf).powi(2);
                2.0 * (rf - xf)
            }
            RecKind::Bce => {
                total += bce_term(xf, rf);
                if rf > BCE_CLAMP && rf < 1.0 - BCE_CLAMP {
                    (rf - xf) / (rf * (1.0 - rf))
                } else {
                    0.0
                }
            }
        };
        *g = T::of(scale * d / count);
    }
    (total / count, grad)
}

/// Batch KLD (summed over dimensions, averaged over samples) with gradients
/// w.r.t. `mu` and `logvar`.
pub fn kld_batch<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>, scale: f64) -> (f64, Vec<T>, Vec<T>) {
    let b = mu.n as f64;
    let mut total = 0.0;
    let mut dmu = Vec::with_capacity(mu.data.len());
    let mut dlv = Vec::with_capacity(mu.data.len());
    for (&m, &lv) in mu.data.iter().zip(&logvar.data) {
        let (m, lv) = (m.as_f64(), lv.as_f64());
        let e = lv.exp();
        total += -0.5 * (1.0 + lv - m * m - e);
        dmu.push(T::of(scale * m / b));
        dlv.push(T::of(scale * 0.5 * (e - 1.0) / b));
    }
    (total / b, dmu, dlv)
}

/// Masked squared error `(1/B) Σ_labeled (r − l)²` and its gradient w.r.t.
/// the estimates; unlabeled positions contribute exactly zero.
pub fn regr_batch<T: Scalar>(estimates: &[T], labels: &[Option<u32>], scale: f64) -> (f64, Vec<T>) {
    assert_eq!(estimates.len(), labels.len());
    let b = estimates.len() as f64;
    let mut total = 0.0;
    let grad = estimates
        .iter()
        .zip(labels)
        .map(|(&r, l)| match l {
            Some(l) => {
                let d = r.as_f64() - *l as f64;
                total += d * d;
                T::of(scale * 2.0 * d / b)
            }
            None => T::zero(),
        })
        .collect();
    (total / b, grad)
}

/// Unweighted loss components of one domain batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub rec: f64,
    pub regr: f64,
    pub kld: f64,
}

impl Components {
    fn is_finite(&self) -> bool {
        self.rec.is_finite() && self.regr.is_finite() && self.kld.is_finite()
    }
}

/// The weights actually applied to one domain at one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EffectiveWeights {
    pub w_rec: f64,
    pub w_regr: f64,
    pub w_kld: f64,
}

impl EffectiveWeights {
    pub fn resolve(weights: &LossWeights, domain: Domain, epoch: usize, regressor_active: bool) -> Self {
        let d = weights.domain(domain);
        EffectiveWeights {
            w_rec: weights.effective_rec(domain, epoch),
            w_regr: if regressor_active { d.w_regr } else { 0.0 },
            w_kld: d.w_kld,
        }
    }

    pub fn apply(&self, c: &Components) -> f64 {
        self.w_rec * c.rec + self.w_regr * c.regr + self.w_kld * c.kld
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub total: f64,
    pub rec_nat: f64,
    pub rec_syn: f64,
    pub regr_nat: f64,
    pub regr_syn: f64,
    pub kld_nat: f64,
    pub kld_syn: f64,
    pub weights_nat: EffectiveWeights,
    pub weights_syn: EffectiveWeights,
}

impl LossReport {
    pub fn components(&self, domain: Domain) -> Components {
        match domain {
            Domain::Nat => Components {
                rec: self.rec_nat,
                regr: self.regr_nat,
                kld: self.kld_nat,
            },
            Domain::Syn => Components {
                rec: self.rec_syn,
                regr: self.regr_syn,
                kld: self.kld_syn,
            },
        }
    }

    /// `Σ_domains w_rec·rec + w_regr·regr + w_kld·kld` with the recorded
    /// weights.
    pub fn weighted_sum(&self) -> f64 {
        self.weights_nat.apply(&self.components(Domain::Nat)) + self.weights_syn.apply(&self.components(Domain::Syn))
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components(Domain::Nat).is_finite() && self.components(Domain::Syn).is_finite()
    }
}

/// Combines per-domain components into the twin loss. A missing domain
/// contributes zeros.
pub fn twin_loss(
    nat: Option<Components>,
    syn: Option<Components>,
    weights: &LossWeights,
    epoch: usize,
    regressor_active: bool,
) -> LossReport {
    let n = nat.unwrap_or_default();
    let s = syn.unwrap_or_default();
    let mut report = LossReport {
        epoch,
        total: 0.0,
        rec_nat: n.rec,
        rec_syn: s.rec,
        regr_nat: n.regr,
        regr_syn: s.regr,
        kld_nat: n.kld,
        kld_syn: s.kld,
        weights_nat: EffectiveWeights::resolve(weights, Domain::Nat, epoch, regressor_active),
        weights_syn: EffectiveWeights::resolve(weights, Domain::Syn, epoch, regressor_active),
    };
    report.total = report.weighted_sum();
    report
}
