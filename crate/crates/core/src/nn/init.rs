use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Param, Scalar};

/// Rows × columns of a weight flattened as `shape[0] × (product of the rest)`.
fn flat_dims(shape: &[usize]) -> (usize, usize) {
    let rows = shape[0];
    (rows, shape[1..].iter().product::<usize>().max(1))
}

/// Fills `param` with a (semi-)orthogonal matrix: orthonormal rows when the
/// flattened weight is wide, orthonormal columns when it is tall.
pub fn orthogonal<T: Scalar, R: Rng + ?Sized>(param: &mut Param<T>, gain: f64, rng: &mut R) {
    let (rows, cols) = flat_dims(&param.shape);
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign fix so the result is uniformly distributed over orthogonal matrices.
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            param.value[i * cols + j] = T::of(gain * v);
        }
    }
}

/// `max |W·Wᵀ − I|` (wide) or `max |Wᵀ·W − I|` (tall) of the flattened weight.
pub fn max_orthogonality_error<T: Scalar>(param: &Param<T>) -> f64 {
    let (rows, cols) = flat_dims(&param.shape);
    let w = DMatrix::<f64>::from_fn(rows, cols, |i, j| param.value[i * cols + j].as_f64());
    let gram = if rows <= cols { &w * w.transpose() } else { w.transpose() * &w };
    let n = gram.nrows();
    (gram - DMatrix::<f64>::identity(n, n)).abs().max()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wide_and_tall_weights_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for shape in [vec![8usize, 3, 5, 5], vec![40, 6], vec![6, 40], vec![5, 5]] {
            let mut p = Param::<f32>::zeros("w", &shape);
            orthogonal(&mut p, 1.0, &mut rng);
            assert!(max_orthogonality_error(&p) < 1e-5, "{shape:?}");
        }
    }
}
