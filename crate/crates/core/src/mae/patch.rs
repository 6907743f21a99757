use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// `[B, C, H, W]` → `[B, N, P·P·C]`: row-major patch grid, each patch
/// flattened channel-major.
pub fn patchify<T: Element>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = *x.shape() else {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: x.shape().to_vec(),
            reason: "expected [B, C, H, W]".into(),
        });
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::InvalidShape {
            op: "patchify",
            shape: x.shape().to_vec(),
            reason: format!("spatial dims not divisible by patch size {p}"),
        });
    }
    let (gh, gw) = (h / p, w / p);
    x.reshape(&[b, c, gh, p, gw, p])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b, gh * gw, c * p * p])
}

/// Inverse of [`patchify`] for a `grid = (gh, gw)` token layout.
pub fn unpatchify<T: Element>(t: &Tensor<T>, p: usize, grid: (usize, usize)) -> Result<Tensor<T>> {
    let (gh, gw) = grid;
    let [b, n, width] = *t.shape() else {
        return Err(Error::InvalidShape {
            op: "unpatchify",
            shape: t.shape().to_vec(),
            reason: "expected [B, N, P·P·C]".into(),
        });
    };
    if p == 0 || n != gh * gw || width % (p * p) != 0 {
        return Err(Error::InvalidShape {
            op: "unpatchify",
            shape: t.shape().to_vec(),
            reason: format!("inconsistent with grid {gh}×{gw} and patch size {p}"),
        });
    }
    let c = width / (p * p);
    t.reshape(&[b, gh, gw, c, p, p])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&[b, c, gh * p, gw * p])
}

/// Fixed 2-D sine-cosine table `[gh·gw, d]`. The first half of each row
/// encodes the grid row, the second half the column; within a half,
/// entries alternate `sin(pos·ω_j)`, `cos(pos·ω_j)` with
/// `ω_j = 10000^(−2j/(d/2))`.
pub fn sincos_pos_embed<T: Element>(grid: (usize, usize), d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!("position embedding width {d} is not divisible by 4")));
    }
    let half = d / 2;
    let (gh, gw) = grid;
    let mut out = Vec::with_capacity(gh * gw * d);
    for i in 0..gh {
        for j in 0..gw {
            for pos in [i as f64, j as f64] {
                for k in 0..half / 2 {
                    let omega = 10000f64.powf(-2.0 * k as f64 / half as f64);
                    out.push(T::cast((pos * omega).sin()));
                    out.push(T::cast((pos * omega).cos()));
                }
            }
        }
    }
    Tensor::from_vec(out, &[gh * gw, d])
}

/// Per-sample random split of `n` tokens into a kept prefix and a masked rest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// `shuffle[b][k]` is the original index of the k-th shuffled token.
    pub shuffle: Vec<Vec<usize>>,
    /// Inverse permutation: original index → shuffled position.
    pub ids_restore: Vec<Vec<usize>>,
    pub n_visible: usize,
    /// `true` where the token is masked, in original order.
    pub mask_flags: Vec<Vec<bool>>,
}

impl MaskPlan {
    /// Number of tokens kept for a given ratio: `n − round(ratio·n)`, but
    /// never fewer than one.
    pub fn visible_count(n: usize, ratio: f64) -> usize {
        (n - (ratio * n as f64).round() as usize).max(1.min(n))
    }

    pub fn new(batch: usize, n: usize, ratio: f64, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Config(format!("mask ratio must lie in [0, 1), got {ratio}")));
        }
        let n_visible = Self::visible_count(n, ratio);
        let shuffle: Vec<Vec<usize>> = if n_visible == n {
            vec![(0..n).collect(); batch]
        } else {
            (0..batch).map(|_| rng.permutation(n)).collect()
        };
        Ok(Self::from_shuffle(shuffle, n_visible))
    }

    pub fn from_shuffle(shuffle: Vec<Vec<usize>>, n_visible: usize) -> Self {
        let mut ids_restore = Vec::with_capacity(shuffle.len());
        let mut mask_flags = Vec::with_capacity(shuffle.len());
        for s in &shuffle {
            let mut inv = vec![0; s.len()];
            let mut flags = vec![true; s.len()];
            for (k, &orig) in s.iter().enumerate() {
                inv[orig] = k;
                if k < n_visible {
                    flags[orig] = false;
                }
            }
            ids_restore.push(inv);
            mask_flags.push(flags);
        }
        Self {
            shuffle,
            ids_restore,
            n_visible,
            mask_flags,
        }
    }

    pub fn tokens(&self) -> usize {
        self.ids_restore.first().map_or(0, Vec::len)
    }

    pub fn n_masked(&self) -> usize {
        self.tokens() - self.n_visible
    }

    pub fn keep_ids(&self) -> Vec<Vec<usize>> {
        self.shuffle.iter().map(|s| s[..self.n_visible].to_vec()).collect()
    }
}

/// Keeps the first `n_visible` tokens of a per-sample shuffle.
pub fn random_masking<T: Element>(tokens: &Tensor<T>, ratio: f64, rng: &mut Rng) -> Result<(Tensor<T>, MaskPlan)> {
    if tokens.rank() != 3 {
        return Err(Error::InvalidShape {
            op: "random_masking",
            shape: tokens.shape().to_vec(),
            reason: "expected [B, N, D]".into(),
        });
    }
    let plan = MaskPlan::new(tokens.dim(0), tokens.dim(1), ratio, rng)?;
    let visible = tokens.batch_gather(&plan.keep_ids())?;
    Ok((visible, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::randn;

    #[test]
    fn patchify_shapes_and_round_trip() {
        let mut r = Rng::new(0);
        let x = randn::<f32>(&mut r, &[1, 256, 16, 16]);
        let t = patchify(&x, 4).unwrap();
        assert_eq!(t.shape(), &[1, 16, 4096]);
        let back = unpatchify(&t, 4, (4, 4)).unwrap();
        assert_eq!(back.shape(), &[1, 256, 16, 16]);
        assert!(back.bitwise_eq(&x));
        let whole = patchify(&x, 16).unwrap();
        assert_eq!(whole.shape(), &[1, 1, 256 * 256]);
        assert!(patchify(&x, 5).is_err());
        assert!(unpatchify(&t, 4, (2, 4)).is_err());
    }

    #[test]
    fn patch_layout_is_channel_major() {
        // 2 channels, 4×4 map, P=2: token 1 is the top-right patch.
        let x = Tensor::<f64>::from_vec((0..32).map(f64::from).collect(), &[1, 2, 4, 4]).unwrap();
        let t = patchify(&x, 2).unwrap().to_vec();
        assert_eq!(&t[8..16], &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
    }

    #[test]
    fn constant_patches_give_constant_map() {
        let t = Tensor::<f64>::full(&[2, 4, 12], 0.25);
        let m = unpatchify(&t, 2, (2, 2)).unwrap();
        assert_eq!(m.shape(), &[2, 3, 4, 4]);
        assert!(m.to_vec().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn sincos_table_properties() {
        let pe = sincos_pos_embed::<f64>((4, 4), 16).unwrap();
        assert_eq!(pe.shape(), &[16, 16]);
        let v = pe.to_vec();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        for (k, &x) in v[..16].iter().enumerate() {
            assert_eq!(x, if k % 2 == 0 { 0.0 } else { 1.0 });
        }
        for a in 0..16 {
            for b in a + 1..16 {
                let d: f64 = (0..16).map(|k| (v[a * 16 + k] - v[b * 16 + k]).abs()).sum();
                assert!(d > 1e-6, "rows {a} and {b} collide");
            }
        }
        assert!(sincos_pos_embed::<f64>((4, 4), 10).is_err());
    }

    #[test]
    fn masking_counts_and_round_trip() {
        let mut r = Rng::new(1);
        let tokens = randn::<f64>(&mut r, &[3, 16, 5]);
        let (vis, plan) = random_masking(&tokens, 0.75, &mut r).unwrap();
        assert_eq!(vis.shape(), &[3, 4, 5]);
        assert_eq!(plan.n_masked(), 12);
        for b in 0..3 {
            assert_eq!(plan.mask_flags[b].iter().filter(|&&m| m).count(), 12);
            for i in 0..16 {
                assert_eq!(plan.shuffle[b][plan.ids_restore[b][i]], i);
            }
        }
        // visible ++ masked-in-shuffle-order, then restore, gives back the input
        let rest: Vec<Vec<usize>> = plan.shuffle.iter().map(|s| s[4..].to_vec()).collect();
        let masked = tokens.batch_gather(&rest).unwrap();
        let full = Tensor::concat(&[vis, masked], 1).unwrap();
        assert!(full.batch_gather(&plan.ids_restore).unwrap().bitwise_eq(&tokens));
    }

    #[test]
    fn zero_ratio_is_identity() {
        let mut r = Rng::new(2);
        let tokens = randn::<f64>(&mut r, &[2, 16, 3]);
        let (vis, plan) = random_masking(&tokens, 0.0, &mut r).unwrap();
        assert!(vis.bitwise_eq(&tokens));
        assert_eq!(plan.ids_restore[0], (0..16).collect::<Vec<_>>());
        assert!(random_masking(&tokens, 1.0, &mut r).is_err());
        assert!(random_masking(&tokens, -0.1, &mut r).is_err());
    }

    #[test]
    fn plans_are_seed_deterministic() {
        let a = MaskPlan::new(4, 16, 0.75, &mut Rng::new(9)).unwrap();
        let b = MaskPlan::new(4, 16, 0.75, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
    }
}
