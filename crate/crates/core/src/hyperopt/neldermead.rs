/// Nelder–Mead minimization inside the box `[lo, hi]`; trial points are
/// clamped to the box. Returns the best vertex and its value.
pub fn minimize_bounded(
    f: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    lo: &[f64],
    hi: &[f64],
    max_iterations: usize,
) -> (Vec<f64>, f64) {
    let n = start.len();
    let clamp = |x: Vec<f64>| -> Vec<f64> { x.iter().zip(lo.iter().zip(hi)).map(|(v, (a, b))| v.clamp(*a, *b)).collect() };
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let x0 = clamp(start.to_vec());
    simplex.push((x0.clone(), eval(&x0)));
    for i in 0..n {
        let mut x = x0.clone();
        let step = 0.1 * (hi[i] - lo[i]).max(1e-12);
        x[i] = if x[i] + step <= hi[i] { x[i] + step } else { x[i] - step };
        let x = clamp(x);
        let v = eval(&x);
        simplex.push((x, v));
    }
    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };
    for _ in 0..max_iterations {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[n].1 - simplex[0].1;
        let size = simplex
            .iter()
            .map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread.abs() < 1e-12 && size < 1e-9 {
            break;
        }
        let mut centroid = vec![0.0; n];
        for (x, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        // Reflection is the point at t = 2 on the segment worst → centroid.
        let xr = clamp(combine(&worst.0, &centroid, 2.0));
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = clamp(combine(&worst.0, &centroid, 3.0));
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let xc = if fr < worst.1 {
                clamp(combine(&worst.0, &centroid, 1.5))
            } else {
                clamp(combine(&worst.0, &centroid, 0.5))
            };
            let fc = eval(&xc);
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x = clamp(combine(&best, &vertex.0, 0.5));
                    let v = eval(&x);
                    *vertex = (x, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_rosenbrock_minimum() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let (x, v) = minimize_bounded(&f, &[-1.0, 1.5], &[-2.0, -2.0], &[2.0, 2.0], 5000);
        assert!(v < 1e-8, "{v}");
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| (x[0] + 5.0).powi(2);
        let (x, _) = minimize_bounded(&f, &[0.5], &[0.0], &[1.0], 500);
        assert!(x[0].abs() < 1e-6);
    }
}
