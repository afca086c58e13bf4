use rand::Rng;

use super::Scalar;

pub fn leaky_relu<T: Scalar>(x: &mut [T], slope: T) {
    for v in x {
        if *v < T::zero() {
            *v *= slope;
        }
    }
}

/// Backward pass given the activation's *output*; the sign of the output
/// equals the sign of the input for any positive slope.
pub fn leaky_relu_backward<T: Scalar>(out: &[T], grad: &mut [T], slope: T) {
    for (g, &y) in grad.iter_mut().zip(out) {
        if y < T::zero() {
            *g *= slope;
        }
    }
}

/// Logistic function, kept strictly inside `(0, 1)` even where `f32`
/// saturates.
pub fn sigmoid<T: Scalar>(x: &mut [T]) {
    let lo = T::of(1e-7);
    let hi = T::one() - lo;
    for v in x {
        let s = T::one() / (T::one() + (-*v).exp());
        *v = s.max(lo).min(hi);
    }
}

/// Inverted dropout. Returns the scaling mask (0 or `1/(1-rate)`) that the
/// backward pass multiplies into the gradient.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(x: &mut [T], rate: f64, rng: &mut R) -> Vec<T> {
    if rate <= 0.0 {
        return vec![T::one(); x.len()];
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

pub fn dropout_backward<T: Scalar>(mask: &[T], grad: &mut [T]) {
    for (g, &m) in grad.iter_mut().zip(mask) {
        *g *= m;
    }
}
