use super::Tensor;

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn finite_diff_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape as x")
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|t| t.data()[0].powi(2), &Tensor::vector(vec![3.0]), 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_is_zero() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = finite_diff_gradient(|_| 4.2, &x, 1e-3);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_is_exact_for_any_step() {
        for h in [1e-6, 1e-2, 0.5, 2.0] {
            let g = finite_diff_gradient(|t| 2.5 * t.data()[0], &Tensor::vector(vec![1.0]), h);
            assert!((g.data()[0] - 2.5).abs() < 1e-9, "h={h}: {}", g.data()[0]);
        }
    }
}
