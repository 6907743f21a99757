//! Training losses and evaluation metrics.

mod metrics;

pub use metrics::{metrics, MetricReport, SampleMetrics};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TverskyParams {
    /// Weight of false positives, `|A − B|`.
    pub alpha: f64,
    /// Weight of false negatives, `|B − A|`.
    pub beta: f64,
    pub smooth: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.7,
            smooth: 1.0,
        }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.smooth > 0.0) {
            return Err(Error::Config(format!(
                "tversky needs alpha, beta >= 0 and smooth > 0 (got {}, {}, {})",
                self.alpha, self.beta, self.smooth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub seg: f64,
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { seg: 0.8, recon: 0.2 }
    }
}

fn check_pair<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_binary<T: Element>(target: &Tensor<T>) -> Result<()> {
    if let Some(v) = target.data().iter().find(|v| **v != T::zero() && **v != T::one()) {
        return Err(Error::InvalidArgument(format!("target mask must be binary, found {v}")));
    }
    Ok(())
}

/// Soft Tversky coefficient per sample, `[B]`. The leading axis is the
/// batch; everything else is summed. `weight`, when given, scales each
/// pixel's contribution to all three soft counts.
pub fn tversky_coeff<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    params: TverskyParams,
    weight: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_pair("tversky", pred, target)?;
    check_binary(target)?;
    params.validate()?;
    if pred.rank() == 0 {
        return Err(Error::InvalidShape {
            op: "tversky",
            shape: vec![],
            reason: "expected a leading batch axis".into(),
        });
    }
    let b = pred.dim(0);
    let n = pred.numel() / b.max(1);
    let p = pred.reshape(&[b, n])?;
    let g = target.reshape(&[b, n])?.detach();
    let (p_w, g_w) = match weight {
        Some(w) => {
            check_pair("tversky weight", pred, w)?;
            let w = w.reshape(&[b, n])?.detach();
            (p.mul(&w)?, g.mul(&w)?)
        }
        None => (p.clone(), g.clone()),
    };
    let inter = p_w.mul(&g)?.sum(&[1], false)?;
    let fp = p_w.sum(&[1], false)?.sub(&inter)?;
    let fn_ = g_w.sum(&[1], false)?.sub(&inter)?;
    let num = inter.add_scalar(params.smooth);
    let den = inter
        .add(&fp.mul_scalar(params.alpha))?
        .add(&fn_.mul_scalar(params.beta))?
        .add_scalar(params.smooth);
    num.div(&den)
}

/// `1 − mean_b T_b`.
pub fn tversky_loss<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    params: TverskyParams,
    weight: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    Ok(tversky_coeff(pred, target, params, weight)?.mean_all().rsub_scalar(1.0))
}

pub fn mse_loss<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair("mse", a, b)?;
    Ok(a.sub(b)?.square().mean_all())
}

/// `seg·tversky + recon·recon_loss`.
pub fn combined_loss<T: Element>(tversky: &Tensor<T>, recon: &Tensor<T>, w: LossWeights) -> Result<Tensor<T>> {
    if tversky.numel() != 1 || recon.numel() != 1 {
        return Err(Error::NonScalarLoss(if tversky.numel() != 1 { tversky.shape() } else { recon.shape() }.to_vec()));
    }
    tversky.mul_scalar(w.seg).add(&recon.mul_scalar(w.recon))
}

/// Hard-pixel emphasis `1 + λ·|box_mean(target) − target|` with a
/// `window`×`window` box clipped at the borders. Input `[B, 1, H, W]`.
pub fn boundary_weight_map<T: Element>(target: &Tensor<T>, window: usize, lambda: f64) -> Result<Tensor<T>> {
    let [b, c, h, w] = *target.shape() else {
        return Err(Error::InvalidShape {
            op: "boundary_weight_map",
            shape: target.shape().to_vec(),
            reason: "expected [B, C, H, W]".into(),
        });
    };
    let r = window / 2;
    let td = target.data();
    let mut out = Vec::with_capacity(td.len());
    for plane in td.chunks(h * w).take(b * c) {
        // summed-area table with a zero border row/column
        let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                sat[(y + 1) * (w + 1) + x + 1] =
                    plane[y * w + x].f64() + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
                let mean = s / ((y1 - y0) * (x1 - x0)) as f64;
                out.push(T::cast(1.0 + lambda * (mean - plane[y * w + x].f64()).abs()));
            }
        }
    }
    Tensor::from_vec(out, target.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::finite_diff_check;

    fn t(v: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec(), shape).unwrap()
    }

    fn no_smooth(alpha: f64, beta: f64) -> TverskyParams {
        TverskyParams {
            alpha,
            beta,
            smooth: 1e-300,
        }
    }

    #[test]
    fn perfect_prediction() {
        let g = t(&[1.0, 0.0, 1.0, 1.0], &[1, 4]);
        let c = tversky_coeff(&g, &g, TverskyParams::default(), None).unwrap();
        assert_eq!(c.to_vec(), vec![1.0]);
        assert_eq!(tversky_loss(&g, &g, TverskyParams::default(), None).unwrap().item(), 0.0);
    }

    #[test]
    fn disjoint_masks_go_to_zero() {
        let a = t(&[1.0, 1.0, 0.0, 0.0], &[1, 4]);
        let b = t(&[0.0, 0.0, 1.0, 1.0], &[1, 4]);
        let c = tversky_coeff(&a, &b, no_smooth(0.5, 0.5), None).unwrap().item();
        assert!(c < 1e-200);
    }

    #[test]
    fn two_one_one_case() {
        // A = {0,1,2}, B = {0,1,3} on a 3×3 grid
        let a = t(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[1, 3, 3]);
        let b = t(&[1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[1, 3, 3]);
        let dice = tversky_coeff(&a, &b, no_smooth(0.5, 0.5), None).unwrap().item();
        assert!((dice - 2.0 / 3.0).abs() < 1e-15);
        let jl = tversky_loss(&a, &b, no_smooth(1.0, 1.0), None).unwrap().item();
        assert!((jl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = t(&[0.5, 0.5], &[1, 2]);
        assert!(tversky_coeff(&a, &t(&[0.5, 1.0], &[1, 2]), TverskyParams::default(), None).is_err());
        assert!(tversky_coeff(&a, &t(&[1.0, 0.0, 1.0], &[1, 3]), TverskyParams::default(), None).is_err());
        let bad = TverskyParams { smooth: 0.0, ..Default::default() };
        assert!(tversky_coeff(&a, &t(&[1.0, 0.0], &[1, 2]), bad, None).is_err());
    }

    #[test]
    fn coefficient_stays_in_unit_interval() {
        let mut r = Rng::new(0);
        for _ in 0..50 {
            let p: Vec<f64> = (0..16).map(|_| r.uniform()).collect();
            let g: Vec<f64> = (0..16).map(|_| (r.below(2)) as f64).collect();
            let c = tversky_coeff(&t(&p, &[1, 16]), &t(&g, &[1, 16]), TverskyParams::default(), None).unwrap().item();
            assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut r = Rng::new(1);
        let p: Vec<f64> = (0..32).map(|_| 0.05 + 0.9 * r.uniform()).collect();
        let g: Vec<f64> = (0..32).map(|_| r.below(2) as f64).collect();
        let g = t(&g, &[2, 1, 4, 4]);
        let w = boundary_weight_map(&g, 3, 5.0).unwrap();
        for weight in [None, Some(&w)] {
            let rep = finite_diff_check(
                |x| tversky_loss(x, &g, TverskyParams::default(), weight).unwrap(),
                &t(&p, &[2, 1, 4, 4]),
                1e-6,
            )
            .unwrap();
            assert!(rep.max_rel_err <= 1e-4, "{}", rep.max_rel_err);
        }
    }

    #[test]
    fn mse_examples() {
        let a = t(&[0.0, 2.0], &[2]);
        let b = t(&[0.0, 0.0], &[2]);
        assert_eq!(mse_loss(&a, &b).unwrap().item(), 2.0);
        assert_eq!(mse_loss(&a, &a).unwrap().item(), 0.0);
        assert_eq!(mse_loss(&b.add_scalar(1.0), &b).unwrap().item(), 1.0);
        assert!(mse_loss(&a, &t(&[1.0], &[1])).is_err());
    }

    #[test]
    fn combined_examples() {
        let w = LossWeights::default();
        let l = combined_loss(&Tensor::<f64>::scalar(0.5), &Tensor::scalar(0.25), w).unwrap().item();
        assert!((l - 0.45).abs() < 1e-15);
        assert_eq!(combined_loss(&Tensor::<f64>::scalar(0.0), &Tensor::scalar(0.0), w).unwrap().item(), 0.0);
        let seg_only = LossWeights { seg: 0.8, recon: 0.0 };
        assert_eq!(combined_loss(&Tensor::<f64>::scalar(0.5), &Tensor::scalar(9.0), seg_only).unwrap().item(), 0.4);
    }

    #[test]
    fn weight_map_is_one_inside_flat_regions() {
        let mut v = vec![0.0; 64];
        v[27] = 1.0;
        let w = boundary_weight_map(&t(&v, &[1, 1, 8, 8]), 3, 5.0).unwrap().to_vec();
        assert_eq!(w[0], 1.0);
        assert!((w[27] - (1.0 + 5.0 * (8.0 / 9.0))).abs() < 1e-12);
        assert!((w[26] - (1.0 + 5.0 / 9.0)).abs() < 1e-12);
    }
}
