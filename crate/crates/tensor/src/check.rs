//! Finite-difference helpers for gradient verification.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn central_difference<F>(mut f: F, inputs: &[Tensor], which: usize, h: f64) -> Tensor
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for k in 0..inputs[which].numel() {
        let orig = probe[which].data()[k];
        probe[which].data_mut()[k] = orig + h;
        let up = f(&probe);
        probe[which].data_mut()[k] = orig - h;
        let down = f(&probe);
        probe[which].data_mut()[k] = orig;
        grad.data_mut()[k] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest componentwise difference, relative to the larger of the two
/// gradients' max-norms (floored at `1e-8` so all-zero gradients compare
/// on an absolute scale).
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let norm = |t: &Tensor| t.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let scale = norm(analytic).max(norm(numeric)).max(1e-8);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_difference_is_exact_enough() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = central_difference(
            |t| t[0].data().iter().map(|v| v * v).sum(),
            &[x],
            0,
            1e-6,
        );
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_of_equal_gradients_is_zero() {
        let a = Tensor::vector(vec![1.0, -3.0]);
        assert_eq!(max_relative_error(&a, &a), 0.0);
        let b = Tensor::vector(vec![1.0, -3.3]);
        assert!((max_relative_error(&a, &b) - 0.3 / 3.3).abs() < 1e-12);
    }
}
