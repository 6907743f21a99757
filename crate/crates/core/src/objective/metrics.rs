use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
}

impl SampleMetrics {
    /// Hard-count scores. Two empty masks score 1 on everything; an empty
    /// prediction against a non-empty target has precision 0.
    pub fn from_counts(id: impl Into<String>, tp: u64, fp: u64, fn_: u64) -> Self {
        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        let (dice, iou) = if tp + fp + fn_ == 0.0 {
            (1.0, 1.0)
        } else {
            (2.0 * tp / (2.0 * tp + fp + fn_), tp / (tp + fp + fn_))
        };
        let precision = if tp + fp > 0.0 {
            tp / (tp + fp)
        } else if fn_ == 0.0 {
            1.0
        } else {
            0.0
        };
        Self {
            id: id.into(),
            dice,
            iou,
            precision,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub threshold: f64,
    pub samples: Vec<SampleMetrics>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl MetricReport {
    pub fn m_dice(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.dice))
    }

    pub fn m_iou(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.iou))
    }

    pub fn m_pre(&self) -> f64 {
        mean(self.samples.iter().map(|s| s.precision))
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.samples.extend(other.samples);
    }

    /// Tab-separated text: three summary lines, then the per-sample table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "threshold\t{}", self.threshold);
        let _ = writeln!(s, "samples\t{}", self.samples.len());
        let _ = writeln!(s, "mDice\t{:.6}", self.m_dice());
        let _ = writeln!(s, "mIOU\t{:.6}", self.m_iou());
        let _ = writeln!(s, "mPre\t{:.6}", self.m_pre());
        let _ = writeln!(s, "\nid\tdice\tiou\tprecision");
        for m in &self.samples {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}", m.id, m.dice, m.iou, m.precision);
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mDice {:.4}  mIOU {:.4}  mPre {:.4}  (n={}, threshold {})",
            self.m_dice(),
            self.m_iou(),
            self.m_pre(),
            self.samples.len(),
            self.threshold
        )
    }
}

/// Scores a batch of probability maps against binary masks. The leading
/// axis is the batch; `ids` names each sample (indices are used if empty).
pub fn metrics<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, threshold: f64, ids: &[String]) -> Result<MetricReport> {
    if pred.shape() != target.shape() || pred.rank() == 0 {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let b = pred.dim(0);
    if !ids.is_empty() && ids.len() != b {
        return Err(Error::InvalidArgument(format!("{} ids for a batch of {b}", ids.len())));
    }
    let n = pred.numel() / b.max(1);
    let (pd, td) = (pred.data(), target.data());
    let samples = (0..b)
        .map(|i| {
            let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
            for (p, g) in pd[i * n..(i + 1) * n].iter().zip(&td[i * n..(i + 1) * n]) {
                match (p.f64() >= threshold, g.f64() >= 0.5) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let id = ids.get(i).cloned().unwrap_or_else(|| i.to_string());
            SampleMetrics::from_counts(id, tp, fp, fn_)
        })
        .collect();
    Ok(MetricReport { threshold, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn t(v: &[f32], shape: &[usize]) -> Tensor<f32> {
        Tensor::from_vec(v.to_vec(), shape).unwrap()
    }

    #[test]
    fn identical_masks_score_one() {
        let g = t(&[1.0, 0.0, 1.0, 0.0], &[1, 4]);
        let r = metrics(&g, &g, 0.5, &[]).unwrap();
        assert_eq!((r.m_dice(), r.m_iou(), r.m_pre()), (1.0, 1.0, 1.0));
        let empty = t(&[0.0; 4], &[1, 4]);
        let r = metrics(&empty, &empty, 0.5, &[]).unwrap();
        assert_eq!((r.m_dice(), r.m_iou(), r.m_pre()), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_pixel_example() {
        let r = metrics(&t(&[1.0, 1.0], &[1, 2]), &t(&[1.0, 0.0], &[1, 2]), 0.5, &[]).unwrap();
        assert!((r.m_dice() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.m_iou(), 0.5);
        assert_eq!(r.m_pre(), 0.5);
    }

    #[test]
    fn empty_prediction_on_nonempty_target() {
        let r = metrics(&t(&[0.0, 0.0], &[1, 2]), &t(&[1.0, 0.0], &[1, 2]), 0.5, &[]).unwrap();
        assert_eq!((r.m_dice(), r.m_iou(), r.m_pre()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn dice_iou_identity_on_random_masks() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let p: Vec<f32> = (0..25).map(|_| rng.uniform() as f32).collect();
            let g: Vec<f32> = (0..25).map(|_| rng.below(2) as f32).collect();
            let r = metrics(&t(&p, &[1, 25]), &t(&g, &[1, 25]), 0.5, &[]).unwrap();
            let s = &r.samples[0];
            assert!(s.dice >= s.iou);
            assert!((s.dice - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);
        }
    }

    #[test]
    fn means_are_per_sample_averages() {
        let p = t(&[1.0, 1.0, 0.0, 0.0], &[2, 2]);
        let g = t(&[1.0, 0.0, 0.0, 0.0], &[2, 2]);
        let r = metrics(&p, &g, 0.5, &["a".into(), "b".into()]).unwrap();
        assert!((r.m_dice() - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        let text = r.to_text();
        for key in ["mDice\t", "mIOU\t", "mPre\t", "a\t", "b\t"] {
            assert!(text.contains(key), "{key}");
        }
        assert!(metrics(&p, &g, 0.5, &["a".into()]).is_err());
    }
}
