use super::ops::for_each_strided;
use super::{numel, strides, Element, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: self.shape().to_vec(),
                reason: format!("{axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        {
            let x = self.data();
            for_each_strided(&out_shape, &gather, |_, j| out.push(x[j]));
        }
        let n = self.numel();
        let os = out_shape.clone();
        Ok(Tensor::from_op("permute", out_shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); n];
            for_each_strided(&os, &gather, |i, j| gx[j] = g[i]);
            vec![Some(gx)]
        }))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        for ax in [a, b] {
            if ax >= rank {
                return Err(Error::InvalidAxis {
                    op: "transpose",
                    axis: ax,
                    rank,
                });
            }
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Joins tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { op: "concat", axis, rank });
        }
        for p in &parts[1..] {
            let ok = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let chunk: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = chunk.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = vec![T::zero(); outer * row];
        let mut col = 0;
        for (p, &c) in parts.iter().zip(&chunk) {
            let d = p.data();
            for o in 0..outer {
                out[o * row + col..o * row + col + c].copy_from_slice(&d[o * c..(o + 1) * c]);
            }
            col += c;
        }
        Ok(Tensor::from_op("concat", out_shape, out, parts.to_vec(), move |g, needs| {
            let mut col = 0;
            chunk
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let start = col;
                    col += c;
                    need.then(|| {
                        let mut gp = Vec::with_capacity(outer * c);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + start..o * row + start + c]);
                        }
                        gp
                    })
                })
                .collect()
        }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { op: "narrow", axis, rank });
        }
        let dim = self.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(Error::InvalidShape {
                op: "narrow",
                shape: self.shape().to_vec(),
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
        }
        let n = self.numel();
        Ok(Tensor::from_op("narrow", out_shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); n];
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Zero padding; `pads[i] = (before, after)` for axis `i`.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Result<Tensor<T>> {
        if pads.len() != self.rank() {
            return Err(Error::InvalidShape {
                op: "pad",
                shape: self.shape().to_vec(),
                reason: format!("{} pad pairs for rank {}", pads.len(), self.rank()),
            });
        }
        let out_shape: Vec<usize> = self.shape().iter().zip(pads).map(|(&d, &(b, a))| d + b + a).collect();
        let os = strides(&out_shape);
        let offset: usize = pads.iter().zip(&os).map(|(&(b, _), &s)| b * s).sum();
        let map: Vec<usize> = os.clone();
        let in_shape = self.shape().to_vec();
        let mut out = vec![T::zero(); numel(&out_shape)];
        {
            let x = self.data();
            for_each_strided(&in_shape, &map, |i, j| out[offset + j] = x[i]);
        }
        Ok(Tensor::from_op("pad", out_shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); numel(&in_shape)];
            for_each_strided(&in_shape, &map, |i, j| gx[i] = g[offset + j]);
            vec![Some(gx)]
        }))
    }

    /// Inverse of [`Tensor::pad`].
    pub fn crop(&self, pads: &[(usize, usize)]) -> Result<Tensor<T>> {
        if pads.len() != self.rank() {
            return Err(Error::InvalidShape {
                op: "crop",
                shape: self.shape().to_vec(),
                reason: format!("{} pad pairs for rank {}", pads.len(), self.rank()),
            });
        }
        let mut t = self.clone();
        for (axis, &(b, a)) in pads.iter().enumerate() {
            if b + a > 0 {
                let d = t.shape()[axis];
                if b + a >= d {
                    return Err(Error::InvalidShape {
                        op: "crop",
                        shape: self.shape().to_vec(),
                        reason: format!("cannot remove {} of {d} on axis {axis}", b + a),
                    });
                }
                t = t.narrow(axis, b, d - b - a)?;
            }
        }
        Ok(t)
    }

    /// Per-sample gather along axis 1 of a `[B, N, ..]` tensor:
    /// `out[b, i] = x[b, indices[b][i]]`.
    pub fn batch_gather(&self, indices: &[Vec<usize>]) -> Result<Tensor<T>> {
        if self.rank() < 2 || indices.len() != self.shape()[0] {
            return Err(Error::InvalidShape {
                op: "batch_gather",
                shape: self.shape().to_vec(),
                reason: format!("{} index lists", indices.len()),
            });
        }
        let (b, n) = (self.shape()[0], self.shape()[1]);
        let k = indices[0].len();
        if k == 0 || indices.iter().any(|ix| ix.len() != k || ix.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidArgument(format!(
                "batch_gather: ragged or out-of-range indices for {n} tokens"
            )));
        }
        let inner: usize = self.shape()[2..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[1] = k;
        let mut out = Vec::with_capacity(b * k * inner);
        {
            let x = self.data();
            for (s, ix) in indices.iter().enumerate() {
                for &i in ix {
                    let base = (s * n + i) * inner;
                    out.extend_from_slice(&x[base..base + inner]);
                }
            }
        }
        let idx = indices.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op("batch_gather", out_shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); total];
            for (s, ix) in idx.iter().enumerate() {
                for (r, &i) in ix.iter().enumerate() {
                    let dst = (s * n + i) * inner;
                    let src = (s * k + r) * inner;
                    gx[dst..dst + inner]
                        .iter_mut()
                        .zip(&g[src..src + inner])
                        .for_each(|(a, &v)| *a += v);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Repeats `self` over leading/unit axes to `shape` (trailing-axes rule).
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let zeros = Tensor::zeros(shape);
        zeros.add(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    fn seq(shape: &[usize]) -> Tensor<f64> {
        let n = numel(shape);
        Tensor::from_vec((0..n).map(|i| i as f64 * 0.37 - 1.1).collect(), shape).unwrap()
    }

    #[test]
    fn concat_channels() {
        let a = Tensor::<f32>::zeros(&[1, 8, 4, 4]);
        let b = Tensor::<f32>::ones(&[1, 8, 4, 4]);
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), &[1, 16, 4, 4]);
        assert_eq!(c.data()[127], 0.0);
        assert_eq!(c.data()[128], 1.0);
        assert!(Tensor::concat(&[Tensor::<f32>::zeros(&[1, 2, 3]), Tensor::zeros(&[1, 2, 4])], 1).is_err());
    }

    #[test]
    fn reshape_round_trip_bitwise() {
        let x = seq(&[2, 3, 4]);
        let y = x.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
        assert!(x.bitwise_eq(&y));
        assert!(x.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn transpose_round_trip_bitwise() {
        let x = seq(&[2, 3, 4]);
        let y = x.transpose(0, 2).unwrap();
        assert_eq!(y.shape(), &[4, 3, 2]);
        assert!(x.bitwise_eq(&y.transpose(0, 2).unwrap()));
        let p = x.permute(&[1, 2, 0]).unwrap();
        assert!(x.bitwise_eq(&p.permute(&[2, 0, 1]).unwrap()));
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = seq(&[1, 3, 288 / 48, 384 / 48]);
        let pads = [(0, 0), (0, 0), (1, 1), (0, 0)];
        let p = x.pad(&pads).unwrap();
        assert_eq!(p.shape(), &[1, 3, 8, 8]);
        assert!(x.bitwise_eq(&p.crop(&pads).unwrap()));
    }

    #[test]
    fn pad_rows_split_evenly() {
        // 288 rows padded to 384: 96 zero rows, 48 above and 48 below
        let x = Tensor::<f32>::ones(&[1, 288, 2]);
        let p = x.pad(&[(0, 0), (48, 48), (0, 0)]).unwrap();
        assert_eq!(p.shape(), &[1, 384, 2]);
        let d = p.data();
        let row_sum = |r: usize| d[r * 2] + d[r * 2 + 1];
        assert!((0..48).all(|r| row_sum(r) == 0.0));
        assert!((48..336).all(|r| row_sum(r) == 2.0));
        assert!((336..384).all(|r| row_sum(r) == 0.0));
    }

    #[test]
    fn concat_backward_splits_exactly() {
        let a = Tensor::<f64>::parameter(vec![1.0; 6], &[2, 3]).unwrap();
        let b = Tensor::<f64>::parameter(vec![1.0; 4], &[2, 2]).unwrap();
        let w = seq(&[2, 5]);
        Tensor::concat(&[a.clone(), b.clone()], 1).unwrap().mul(&w).unwrap().sum_all().backward().unwrap();
        let (ga, gb) = (a.grad().unwrap(), b.grad().unwrap());
        let rejoined = Tensor::concat(
            &[Tensor::from_vec(ga, &[2, 3]).unwrap(), Tensor::from_vec(gb, &[2, 2]).unwrap()],
            1,
        )
        .unwrap();
        assert!(rejoined.bitwise_eq(&w));
    }

    #[test]
    fn shape_op_grads() {
        let x = seq(&[2, 3, 4]);
        let w = seq(&[4, 3, 2]).mul_scalar(0.5);
        let rep = finite_diff_check(|v| v.permute(&[2, 1, 0]).unwrap().mul(&w).unwrap().sum_all(), &x, 1e-6).unwrap();
        assert!(rep.max_rel_err < 1e-6);
        let w2 = seq(&[2, 2, 4]);
        let rep = finite_diff_check(|v| v.narrow(1, 1, 2).unwrap().mul(&w2).unwrap().sum_all(), &x, 1e-6).unwrap();
        assert!(rep.max_rel_err < 1e-6);
        let w3 = seq(&[2, 5, 4]);
        let rep =
            finite_diff_check(|v| v.pad(&[(0, 0), (1, 1), (0, 0)]).unwrap().mul(&w3).unwrap().sum_all(), &x, 1e-6)
                .unwrap();
        assert!(rep.max_rel_err < 1e-6);
        let w4 = seq(&[2, 4, 4]);
        let idx = vec![vec![2, 0, 2, 1], vec![1, 1, 0, 2]];
        let rep = finite_diff_check(|v| v.batch_gather(&idx).unwrap().mul(&w4).unwrap().sum_all(), &x, 1e-6).unwrap();
        assert!(rep.max_rel_err < 1e-6);
    }

    #[test]
    fn gather_restore_round_trip() {
        let x = seq(&[1, 5, 2]);
        let perm = vec![vec![3, 0, 4, 1, 2]];
        let mut inv = vec![0; 5];
        for (i, &p) in perm[0].iter().enumerate() {
            inv[p] = i;
        }
        let back = x.batch_gather(&perm).unwrap().batch_gather(&[inv]).unwrap();
        assert!(x.bitwise_eq(&back));
    }
}
