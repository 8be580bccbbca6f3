use crate::error::{Error, Result};
use crate::scalar::Real;

/// Denominator floor of the relative error, so that near-zero gradient
/// entries are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares an analytic gradient of `f` at `params` with finite differences
/// and returns the worst relative discrepancy over all coordinates.
///
/// Each coordinate is probed with central differences. Where the function
/// has a kink inside `±step` (ReLU, max-pooling) the central estimate is
/// meaningless, so the best of the central and the two one-sided estimates is
/// taken for that coordinate.
pub fn grad_check<T: Real>(
    params: &[T],
    analytic: &[T],
    step: T,
    mut f: impl FnMut(&[T]) -> T,
) -> Result<T> {
    if params.len() != analytic.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }
    let mut x = params.to_vec();
    let f0 = f(&x);
    if !f0.is_finite() {
        return Err(Error::input(
            "grad_check: objective is not finite at the base point",
        ));
    }
    let two = T::lit(2.0);
    let floor = T::lit(REL_ERROR_FLOOR);
    let mut worst = T::zero();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let fp = f(&x);
        x[i] = orig - step;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::input(format!(
                "grad_check: objective not finite near coordinate {i}"
            )));
        }
        let a = analytic[i];
        let rel = |n: T| (a - n).abs() / a.abs().max(n.abs()).max(floor);
        let central = rel((fp - fm) / (two * step));
        let err = if central > T::lit(1e-6) {
            central
                .min(rel((fp - f0) / step))
                .min(rel((f0 - fm) / step))
        } else {
            central
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::affine;
    use crate::nn::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let err = grad_check(&[3.0f64], &[6.0], 1e-5, |x| x[0] * x[0]).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let err = grad_check(&[3.0f64], &[5.0], 1e-5, |x| x[0] * x[0]).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn affine_sum_has_unit_bias_gradient() {
        let w = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25], vec![1.0, 1.0]]).unwrap();
        let x = [0.3, -0.7];
        let ones = [1.0; 3];
        let err = grad_check(&[0.1, 0.2, 0.3], &ones, 1e-5, |b| {
            affine(&x, &w, b).unwrap().iter().sum()
        })
        .unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn non_finite_objective_is_an_input_error() {
        assert!(matches!(
            grad_check(&[1.0f64], &[0.0], 1e-5, |_| f64::NAN),
            Err(Error::Input(_))
        ));
    }
}
