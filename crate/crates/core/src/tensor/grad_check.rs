use super::Tensor;

/// Central-difference gradient `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    probe.zero_grad();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * h);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute difference norm when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-10 {
        diff
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::vector(vec![0.1, -4.0, 7.5, 2.0]);
        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::vector(vec![3.0]);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_gives_zero() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|_| 42.0, &x, 1e-5);
        assert!(g.data().iter().all(|v| v.abs() < 1e-9));
    }
}
