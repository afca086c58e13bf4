use super::{Param, Scalar, Tensor};

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// What the backward pass and the running-statistics update need from a
/// training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], T::one()),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: Param::zeros(format!("{name}.running_mean"), &[channels]).buffer(),
            running_var: Param::filled(format!("{name}.running_var"), &[channels], T::one()).buffer(),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn affine(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let p = x.h * x.w;
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..x.n {
            let off = i * x.features();
            for ch in 0..x.c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for j in off + ch * p..off + (ch + 1) * p {
                    let h = (x.data[j] - mean[ch]) * inv_std[ch];
                    xhat.data[j] = h;
                    y.data[j] = g * h + b;
                }
            }
        }
        (y, xhat)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> (Tensor<T>, BatchNormCache<T>) {
        assert_eq!(x.c, self.channels());
        let p = x.h * x.w;
        let count = (x.n * p) as f64;
        let mut mean = vec![T::zero(); x.c];
        let mut var = vec![T::zero(); x.c];
        for ch in 0..x.c {
            let vals = (0..x.n).flat_map(|i| x.sample(i)[ch * p..(ch + 1) * p].iter().copied());
            let m = vals.clone().map(|v| v.as_f64()).sum::<f64>() / count;
            let v = vals.map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / count;
            mean[ch] = T::of(m);
            var[ch] = T::of(v);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(self.eps)).sqrt()).collect();
        let (y, normalized) = self.affine(x, &mean, &inv_std);
        let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let unbiased_var = var.iter().map(|&v| v * T::of(correction)).collect();
        (
            y,
            BatchNormCache {
                normalized,
                inv_std,
                mean,
                unbiased_var,
            },
        )
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let inv_std: Vec<T> = self
            .running_var
            .value
            .iter()
            .map(|&v| T::one() / (v + T::of(self.eps)).sqrt())
            .collect();
        self.affine(x, &self.running_mean.value, &inv_std).0
    }

    pub fn update_running_stats(&mut self, cache: &BatchNormCache<T>) {
        let m = T::of(self.momentum);
        for ch in 0..self.channels() {
            let rm = &mut self.running_mean.value[ch];
            *rm = (T::one() - m) * *rm + m * cache.mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (T::one() - m) * *rv + m * cache.unbiased_var[ch];
        }
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let xhat = &cache.normalized;
        let p = dy.h * dy.w;
        let count = T::of((dy.n * p) as f64);
        let mut dx = dy.clone();
        for ch in 0..dy.c {
            let idx = |i: usize| i * dy.features() + ch * p..i * dy.features() + (ch + 1) * p;
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..dy.n {
                for j in idx(i) {
                    sum_dy += dy.data[j];
                    sum_dy_xhat += dy.data[j] * xhat.data[j];
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            let g = self.gamma.value[ch];
            let scale = g * cache.inv_std[ch] / count;
            for i in 0..dy.n {
                for j in idx(i) {
                    dx.data[j] = scale * (count * dy.data[j] - sum_dy - xhat.data[j] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardized() {
        let bn = BatchNorm2d::<f64>::new("bn", 2);
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| (i as f64 * 0.7).sin() * 3.0 + 1.0).collect();
        let x = Tensor::from_vec(2, 2, 3, 3, data);
        let (y, _) = bn.forward_train(&x);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|i| y.sample(i)[ch * 9..(ch + 1) * 9].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn fresh_layer_is_identity_in_eval() {
        let bn = BatchNorm2d::<f64>::new("bn", 1);
        let x = Tensor::from_vec(1, 1, 1, 2, vec![0.3, -2.0]);
        let y = bn.forward_eval(&x);
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
