//! Finite-difference sweep over every differentiable op and composite block,
//! in f64 on inputs of at most 64 elements.

use std::cell::RefCell;

use crate::backbone::{AggBlock, BlockKind, Cbs, CbsKind, DcelanPath, DecoderStage, DownSample, UpSample};
use crate::error::{Error, Result};
use crate::mae::{MaeConfig, MicroMae};
use crate::nn::functional::{batch_norm, conv2d, layer_norm, max_pool2d, upsample_bilinear, BatchNormArgs};
use crate::nn::{Linear, MultiHeadAttention, Phase, TransformerBlock};
use crate::objective::{boundary_weight_map, combined_loss, tversky_loss, LossWeights, TverskyParams};
use crate::rng::Rng;
use crate::tensor::{check_leaf, finite_diff_check, Tensor};

/// Tolerance for compositions of smooth ops.
pub const SMOOTH_TOL: f64 = 1e-5;
/// Tolerance for anything routed through a max.
pub const KINK_TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;
/// Largest input a check may use.
pub const MAX_INPUT: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOutcome {
    pub name: &'static str,
    pub tolerance: f64,
    /// Worst relative error over the input and any checked parameters.
    pub max_rel_err: f64,
    pub input_len: usize,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

type T = f64;

struct Suite {
    seed: u64,
    rng: Rng,
    out: Vec<GradCheckOutcome>,
}

impl Suite {
    fn randn(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| self.rng.normal()).collect(), shape).expect("shape matches")
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| lo + (hi - lo) * self.rng.uniform()).collect(), shape).expect("shape matches")
    }

    /// Reduces `f(x)` to a scalar through a fixed random projection and
    /// checks the gradient w.r.t. `x` and each of `leaves`.
    fn check(
        &mut self,
        name: &'static str,
        tolerance: f64,
        x: &Tensor<T>,
        f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
        leaves: &[&Tensor<T>],
    ) -> Result<()> {
        self.sweep(name, tolerance, x, true, f, leaves)
    }

    /// Parameter-only variant for functions that deliberately stop the
    /// gradient to part of their input.
    fn check_params(
        &mut self,
        name: &'static str,
        tolerance: f64,
        x: &Tensor<T>,
        f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
        leaves: &[&Tensor<T>],
    ) -> Result<()> {
        self.sweep(name, tolerance, x, false, f, leaves)
    }

    fn sweep(
        &mut self,
        name: &'static str,
        tolerance: f64,
        x: &Tensor<T>,
        wrt_input: bool,
        f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
        leaves: &[&Tensor<T>],
    ) -> Result<()> {
        if x.numel() > MAX_INPUT {
            return Err(Error::InvalidArgument(format!("{name}: input of {} elements", x.numel())));
        }
        let seed = self.seed;
        let failure: RefCell<Option<Error>> = RefCell::new(None);
        let scalar = |v: &Tensor<T>| -> Tensor<T> {
            match f(v).and_then(|y| {
                let mut r = Rng::keyed(seed, y.numel() as u64);
                let w = Tensor::from_vec((0..y.numel()).map(|_| r.normal()).collect(), y.shape())?;
                Ok(y.mul(&w)?.sum_all())
            }) {
                Ok(s) => s,
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    Tensor::scalar(f64::NAN)
                }
            }
        };
        let mut worst = 0.0f64;
        let mut result = Ok(());
        if wrt_input {
            match finite_diff_check(&scalar, x, EPS) {
                Ok(r) => worst = r.max_rel_err,
                Err(e) => result = Err(e),
            }
        }
        let fixed = x.detach();
        for leaf in leaves {
            if result.is_err() {
                break;
            }
            match check_leaf(|| scalar(&fixed), leaf, EPS) {
                Ok(r) => worst = worst.max(r.max_rel_err),
                Err(e) => result = Err(e),
            }
        }
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        result?;
        self.out.push(GradCheckOutcome {
            name,
            tolerance,
            max_rel_err: worst,
            input_len: x.numel(),
        });
        Ok(())
    }
}

fn param(t: Tensor<T>) -> Tensor<T> {
    t.requires_grad_(true)
}

/// Runs every check; returns one outcome per op or block.
pub fn run(seed: u64) -> Result<Vec<GradCheckOutcome>> {
    let mut s = Suite {
        seed,
        rng: Rng::new(seed),
        out: Vec::new(),
    };
    primitive_ops(&mut s)?;
    layer_ops(&mut s)?;
    blocks(&mut s)?;
    objectives(&mut s)?;
    Ok(s.out)
}

fn primitive_ops(s: &mut Suite) -> Result<()> {
    let x = s.randn(&[2, 3, 4]);
    let b = s.randn(&[3, 1]);
    let d = s.uniform(&[4], 0.5, 2.0);
    s.check("add/sub/mul/div (broadcast)", SMOOTH_TOL, &x, |v| v.add(&b)?.mul(v)?.sub(&b)?.div(&d), &[])?;
    let w = s.randn(&[4, 5]);
    let in1 = s.randn(&[2, 3, 4]);
    s.check("matmul", SMOOTH_TOL, &in1, |v| v.matmul(&w), &[])?;
    let pos = s.uniform(&[24], 0.5, 2.0);
    s.check("exp", SMOOTH_TOL, &x, |v| Ok(v.exp()), &[])?;
    s.check("ln", SMOOTH_TOL, &pos, |v| Ok(v.ln()), &[])?;
    s.check("sqrt", SMOOTH_TOL, &pos, |v| Ok(v.sqrt()), &[])?;
    s.check("powf", SMOOTH_TOL, &pos, |v| Ok(v.powf(1.7)), &[])?;
    s.check("scalar affine", SMOOTH_TOL, &x, |v| Ok(v.mul_scalar(-1.5).add_scalar(0.3).rsub_scalar(2.0).neg()), &[])?;
    s.check("square", SMOOTH_TOL, &x, |v| Ok(v.square()), &[])?;
    s.check("tanh", SMOOTH_TOL, &x, |v| Ok(v.tanh()), &[])?;
    s.check("sigmoid", SMOOTH_TOL, &x, |v| Ok(v.sigmoid()), &[])?;
    s.check("silu", SMOOTH_TOL, &x, |v| Ok(v.silu()), &[])?;
    s.check("gelu", SMOOTH_TOL, &x, |v| Ok(v.gelu()), &[])?;
    let in2 = s.randn(&[4, 8]);
    s.check("softmax", SMOOTH_TOL, &in2, |v| Ok(v.softmax()), &[])?;
    s.check("sum/mean over axes", SMOOTH_TOL, &x, |v| v.mul(&v.sum(&[1], true)?)?.mean(&[0, 2], false), &[])?;
    s.check("sum_all/mean_all", SMOOTH_TOL, &x, |v| Ok(v.square().sum_all().add(&v.mean_all())?), &[])?;
    s.check("max over axes", KINK_TOL, &x, |v| v.max(&[2], false), &[])?;
    s.check(
        "reshape/permute/transpose",
        SMOOTH_TOL,
        &x,
        |v| v.reshape(&[6, 4])?.transpose(0, 1)?.reshape(&[4, 3, 2])?.permute(&[2, 0, 1]),
        &[],
    )?;
    s.check(
        "concat/narrow",
        SMOOTH_TOL,
        &x,
        |v| Tensor::concat(&[v.narrow(2, 1, 2)?, v.square()], 2),
        &[],
    )?;
    s.check("pad/crop", SMOOTH_TOL, &x, |v| v.pad(&[(0, 0), (1, 2), (0, 1)])?.crop(&[(0, 0), (0, 1), (1, 0)]), &[])?;
    let idx = vec![vec![2, 0], vec![1, 1]];
    let in3 = s.randn(&[2, 3, 4]);
    s.check("batch_gather", SMOOTH_TOL, &in3, |v| v.batch_gather(&idx), &[])?;
    let in4 = s.randn(&[3, 1]);
    s.check("broadcast_to", SMOOTH_TOL, &in4, |v| v.broadcast_to(&[2, 3, 4]), &[])?;
    Ok(())
}

fn layer_ops(s: &mut Suite) -> Result<()> {
    let x = s.randn(&[1, 2, 5, 5]);
    let w3 = param(s.randn(&[3, 2, 3, 3]));
    let bias = param(s.randn(&[3]));
    s.check("conv2d 3x3", SMOOTH_TOL, &x, |v| conv2d(v, &w3, Some(&bias), 1, 1), &[&w3, &bias])?;
    s.check("conv2d 3x3 stride 2", SMOOTH_TOL, &x, |v| conv2d(v, &w3, None, 2, 1), &[&w3])?;
    let w1 = param(s.randn(&[4, 2, 1, 1]));
    s.check("conv2d 1x1", SMOOTH_TOL, &x, |v| conv2d(v, &w1, None, 1, 0), &[&w1])?;

    let x = s.randn(&[2, 3, 3, 3]);
    let (gamma, beta) = (param(s.uniform(&[3], 0.5, 1.5)), param(s.randn(&[3])));
    let (rm, rv) = (Tensor::zeros(&[3]), Tensor::ones(&[3]));
    let bn = |v: &Tensor<T>| {
        batch_norm(
            v,
            BatchNormArgs {
                gamma: &gamma,
                beta: &beta,
                running_mean: &rm,
                running_var: &rv,
                momentum: 0.1,
                eps: 1e-5,
                train: true,
            },
        )
    };
    s.check("batch_norm (train)", SMOOTH_TOL, &x, bn, &[&gamma, &beta])?;

    let x = s.randn(&[2, 4, 6]);
    let (g, b) = (param(s.uniform(&[6], 0.5, 1.5)), param(s.randn(&[6])));
    s.check("layer_norm", SMOOTH_TOL, &x, |v| layer_norm(v, &g, &b, 1e-6), &[&g, &b])?;

    let in5 = s.randn(&[1, 2, 4, 4]);
    s.check("max_pool2d", KINK_TOL, &in5, max_pool2d, &[])?;
    let in6 = s.randn(&[1, 2, 3, 3]);
    s.check("upsample bilinear", SMOOTH_TOL, &in6, |v| upsample_bilinear(v, 6, 5), &[])?;

    let lin = Linear::<T>::new(6, 5, &mut s.rng);
    let in7 = s.randn(&[2, 3, 6]);
    s.check("linear", SMOOTH_TOL, &in7, |v| lin.forward(v), &[&lin.weight, &lin.bias])?;
    Ok(())
}

fn blocks(s: &mut Suite) -> Result<()> {
    let x = s.randn(&[1, 4, 4, 4]);
    for (name, kind) in [("CBS.1", CbsKind::Cbs1), ("CBS.2", CbsKind::Cbs2), ("CBS.3", CbsKind::Cbs3)] {
        let cbs = Cbs::<T>::new(kind, 4, 4, &mut s.rng);
        s.check(name, SMOOTH_TOL, &x, |v| cbs.forward(v, Phase::Train), &[&cbs.conv.weight, &cbs.bn.gamma])?;
    }
    for (name, kind) in [("ELAN block", BlockKind::Elan), ("DCELAN block", BlockKind::Dcelan)] {
        let blk = AggBlock::<T>::new(kind, 4, 4, &mut s.rng)?;
        s.check(name, SMOOTH_TOL, &x, |v| blk.forward(v, Phase::Train), &[&blk.stem.conv.weight])?;
    }
    let down = DownSample::<T>::new(4, 8, &mut s.rng)?;
    s.check("down-sampler", KINK_TOL, &x, |v| down.forward(v, Phase::Train), &[&down.conv_down.conv.weight])?;
    let up = UpSample::<T>::new(8, 4, &mut s.rng)?;
    let small = s.randn(&[1, 8, 2, 2]);
    s.check("up-sampler", SMOOTH_TOL, &small, |v| up.forward(v, Phase::Train), &[])?;
    let path = DcelanPath::<T>::new(4, 2, &mut s.rng);
    s.check("DCELAN PATH", SMOOTH_TOL, &x, |v| path.forward(v, Phase::Train), &[&path.units[0].0.conv.weight])?;
    let stage = DecoderStage::<T>::new(BlockKind::Dcelan, 8, 4, 2, &mut s.rng)?;
    let skip = s.randn(&[1, 4, 4, 4]);
    s.check("decoder stage (input)", SMOOTH_TOL, &small, |v| stage.forward(v, &skip, Phase::Train), &[])?;
    s.check("decoder stage (skip)", SMOOTH_TOL, &skip, |v| stage.forward(&small, v, Phase::Train), &[])?;

    let tokens = s.randn(&[2, 4, 8]);
    let attn = MultiHeadAttention::<T>::new(8, 2, &mut s.rng)?;
    s.check("multi-head attention", SMOOTH_TOL, &tokens, |v| attn.forward(v), &[&attn.w_q, &attn.w_o])?;
    let blk = TransformerBlock::<T>::new(8, 2, 2, &mut s.rng)?;
    s.check("transformer block", SMOOTH_TOL, &tokens, |v| blk.forward(v), &[&blk.mlp.fc1.weight, &blk.ln1.gamma])?;
    Ok(())
}

fn tiny_mae(rng: &mut Rng) -> Result<MicroMae<T>> {
    MicroMae::new(
        MaeConfig {
            channels: 2,
            patch: 2,
            dim: 8,
            dec_dim: 8,
            enc_depth: 1,
            dec_depth: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        rng,
    )
}

fn objectives(s: &mut Suite) -> Result<()> {
    let mae = tiny_mae(&mut s.rng)?;
    let feat = s.randn(&[1, 2, 4, 4]);
    let seed = s.seed;
    // the reconstruction target is a stop-gradient copy of the input
    s.check_params(
        "micro-MAE reconstruction",
        SMOOTH_TOL,
        &feat,
        |v| Ok(mae.forward(v, 0.75, &mut Rng::keyed(seed, 7))?.recon_loss),
        &[&mae.mask_token, &mae.patch_proj.weight],
    )?;
    s.check(
        "micro-MAE spliced features",
        SMOOTH_TOL,
        &feat,
        |v| Ok(mae.forward(v, 0.75, &mut Rng::keyed(seed, 7))?.recon_feat),
        &[],
    )?;

    let logits = s.randn(&[2, 1, 4, 4]);
    let target = Tensor::from_vec((0..32).map(|_| f64::from(u8::from(s.rng.uniform() < 0.4))).collect(), &[2, 1, 4, 4])?;
    let tp = TverskyParams::default();
    s.check("Tversky loss", SMOOTH_TOL, &logits, |v| tversky_loss(&v.sigmoid(), &target, tp, None), &[])?;
    let wmap = boundary_weight_map(&target, 3, 2.0)?;
    s.check("weighted Tversky loss", SMOOTH_TOL, &logits, |v| tversky_loss(&v.sigmoid(), &target, tp, Some(&wmap)), &[])?;

    // Both terms of the joint objective, through their own inputs.
    let w = LossWeights::default();
    let objective = |lg: &Tensor<T>, ft: &Tensor<T>| -> Result<Tensor<T>> {
        let recon = mae.forward(ft, 0.75, &mut Rng::keyed(seed, 7))?.recon_loss;
        combined_loss(&tversky_loss(&lg.sigmoid(), &target, tp, None)?, &recon, w)
    };
    s.check("joint objective (segmentation term)", SMOOTH_TOL, &logits, |v| objective(v, &feat), &[])?;
    s.check_params(
        "joint objective (reconstruction term)",
        SMOOTH_TOL,
        &feat,
        |v| objective(&logits, v),
        &[&mae.mask_token, &mae.pred_head.weight],
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = run(3).unwrap();
        assert!(results.len() > 30);
        for r in &results {
            assert!(r.input_len <= MAX_INPUT);
            assert!(r.passed(), "{} rel err {:e}", r.name, r.max_rel_err);
        }
    }
}
