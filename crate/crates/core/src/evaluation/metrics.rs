use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Error statistics over one group of samples. `mre` is a fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    pub n: usize,
    pub mae: f64,
    pub mre: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mae: f64,
    /// Mean relative error as a fraction.
    pub mre: f64,
    /// The same value in percent, for display.
    pub mre_percent: f64,
    pub accuracy: f64,
    pub per_count: BTreeMap<u32, CountMetrics>,
}

/// Rounds half away from zero.
pub fn round_count(p: f64) -> f64 {
    p.round()
}

pub fn is_exact(prediction: f64, label: u32) -> bool {
    round_count(prediction) == label as f64
}

#[derive(Default)]
struct Acc {
    n: usize,
    abs: f64,
    rel: f64,
    hits: usize,
}

impl Acc {
    fn add(&mut self, p: f64, l: u32) {
        let e = (p - l as f64).abs();
        self.n += 1;
        self.abs += e;
        self.rel += e / l as f64;
        self.hits += is_exact(p, l) as usize;
    }

    fn finish(&self) -> CountMetrics {
        let n = self.n as f64;
        CountMetrics {
            n: self.n,
            mae: self.abs / n,
            mre: self.rel / n,
            accuracy: self.hits as f64 / n,
        }
    }
}

/// MAE, MRE and accuracy overall and per true count.
pub fn metrics(predictions: &[f64], labels: &[u32]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if let Some(i) = labels.iter().position(|&l| l == 0) {
        return Err(invalid(format!("label at position {i} is 0; relative error is undefined")));
    }
    if let Some(i) = predictions.iter().position(|p| !p.is_finite()) {
        return Err(invalid(format!("prediction at position {i} is not finite")));
    }
    let mut total = Acc::default();
    let mut groups: BTreeMap<u32, Acc> = BTreeMap::new();
    for (&p, &l) in predictions.iter().zip(labels) {
        total.add(p, l);
        groups.entry(l).or_default().add(p, l);
    }
    let t = total.finish();
    Ok(MetricsReport {
        n: t.n,
        mae: t.mae,
        mre: t.mre,
        mre_percent: 100.0 * t.mre,
        accuracy: t.accuracy,
        per_count: groups.into_iter().map(|(k, a)| (k, a.finish())).collect(),
    })
}

impl MetricsReport {
    /// Per-count table as CSV `count,n,mae,mre,acc`.
    pub fn per_count_csv(&self) -> String {
        let mut s = String::from("count,n,mae,mre,acc\n");
        for (c, m) in &self.per_count {
            s.push_str(&format!("{c},{},{},{},{}\n", m.n, m.mae, m.mre, m.accuracy));
        }
        s
    }

    /// One-line summary with MRE as a percentage.
    pub fn summary(&self) -> String {
        format!(
            "n={} MAE={:.4} MRE={:.2}% accuracy={:.1}%",
            self.n,
            self.mae,
            self.mre_percent,
            100.0 * self.accuracy
        )
    }
}
