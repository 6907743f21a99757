//! Central finite-difference oracle for analytic gradients.

use super::{no_grad, Element, Tensor};
use crate::error::{Error, Result};

/// Denominator guard of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Norm-wise relative error, `max_i |analytic_i − numeric_i| / (max_j |numeric_j| + 1e-8)`.
    /// Scaling by the whole gradient keeps near-zero components, where
    /// central differences only see roundoff, from dominating.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    fn from_pair(analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        let scale = numeric.iter().fold(0.0f64, |m, n| m.max(n.abs())) + REL_ERR_FLOOR;
        let (mut max_rel_err, mut worst_index) = (0.0f64, 0);
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = (a - n).abs() / scale;
            if e > max_rel_err {
                max_rel_err = e;
                worst_index = i;
            }
        }
        Self {
            max_rel_err,
            worst_index,
            analytic,
            numeric,
        }
    }
}

fn scalar_value<T: Element>(y: &Tensor<T>, index: usize) -> Result<f64> {
    if y.numel() != 1 {
        return Err(Error::NonScalarLoss(y.shape().to_vec()));
    }
    let v = y.item().f64();
    if !v.is_finite() {
        return Err(Error::NonFinite { index, value: v });
    }
    Ok(v)
}

/// Compares the backward pass of scalar `f` at `x` against central
/// differences with step `eps`. `x` itself is not modified.
pub fn finite_diff_check<T: Element>(
    f: impl Fn(&Tensor<T>) -> Tensor<T>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<GradCheckReport> {
    let leaf = x.detach().requires_grad_(true);
    check_leaf(|| f(&leaf), &leaf, eps)
}

/// Like [`finite_diff_check`] but perturbs an existing leaf in place (e.g. a
/// layer parameter) and evaluates the closure as-is. The leaf's gradient is
/// reset first; other leaves reached by `f` accumulate gradient as usual.
pub fn check_leaf<T: Element>(mut f: impl FnMut() -> Tensor<T>, leaf: &Tensor<T>, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if !leaf.is_leaf() || !leaf.requires_grad() {
        return Err(Error::InvalidArgument("gradient check target must be a leaf with requires_grad".into()));
    }
    leaf.zero_grad();
    let y = f();
    scalar_value(&y, usize::MAX)?;
    y.backward()?;
    drop(y);
    let analytic: Vec<f64> = match leaf.grad() {
        Some(g) => g.iter().map(|v| v.f64()).collect(),
        None => vec![0.0; leaf.numel()],
    };
    if let Some((index, &value)) = analytic.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite { index, value });
    }

    let _guard = no_grad();
    let mut numeric = Vec::with_capacity(leaf.numel());
    for i in 0..leaf.numel() {
        let orig = leaf.data()[i];
        leaf.data_mut()[i] = T::cast(orig.f64() + eps);
        let plus = scalar_value(&f(), i);
        leaf.data_mut()[i] = T::cast(orig.f64() - eps);
        let minus = scalar_value(&f(), i);
        leaf.data_mut()[i] = orig;
        numeric.push((plus? - minus?) / (2.0 * eps));
    }
    Ok(GradCheckReport::from_pair(analytic, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let rep = finite_diff_check(|v| v.square().sum_all(), &x, 1e-5).unwrap();
        assert_eq!(rep.analytic, vec![2.0, 4.0]);
        assert!(rep.max_rel_err <= 1e-7, "{}", rep.max_rel_err);
    }

    #[test]
    fn plain_sum_is_exact() {
        let x = Tensor::<f64>::from_vec(vec![0.5, -1.0, 3.0], &[3]).unwrap();
        let rep = finite_diff_check(|v| v.sum_all(), &x, 1e-6).unwrap();
        assert!(rep.max_rel_err < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        // the detached factor hides half of d(v²)/dv from backward
        let x = Tensor::<f64>::from_vec(vec![1.0, -2.0, 0.5], &[3]).unwrap();
        let rep = finite_diff_check(|v| v.mul(&v.detach()).unwrap().sum_all(), &x, 1e-6).unwrap();
        assert!((rep.max_rel_err - 0.5).abs() < 1e-6, "{}", rep.max_rel_err);
        assert_eq!(rep.worst_index, 1);
    }

    #[test]
    fn near_zero_components_are_judged_against_the_whole_gradient() {
        let x = Tensor::<f64>::from_vec(vec![1e-9, 3.0], &[2]).unwrap();
        let rep = finite_diff_check(|v| v.powf(3.0).sum_all(), &x, 1e-6).unwrap();
        assert!(rep.max_rel_err < 1e-8, "{}", rep.max_rel_err);
    }

    #[test]
    fn reports_non_finite_with_index() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 0.0], &[2]).unwrap();
        let err = finite_diff_check(|v| v.ln().sum_all(), &x, 1e-6).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn rejects_bad_eps_and_non_scalar() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        assert!(finite_diff_check(|v| v.sum_all(), &x, 0.0).is_err());
        assert!(finite_diff_check(|v| v.square(), &x, 1e-6).is_err());
    }

    #[test]
    fn max_check_passes_with_unique_argmax() {
        // ties broken beforehand: all entries distinct by far more than eps
        let x = Tensor::<f64>::from_vec(vec![0.1, 0.7, 0.4, 0.65], &[2, 2]).unwrap();
        let rep = finite_diff_check(|v| v.max(&[1], false).unwrap().sum_all(), &x, 1e-6).unwrap();
        assert!(rep.max_rel_err < 1e-8);
    }
}
