use super::block::{AggBlock, BlockKind};
use super::cbs::{Cbs, CbsKind};
use super::sampler::UpSample;
use crate::error::{Error, Result};
use crate::nn::{join, Module, ParamKind, Phase};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Skip-path unit stack: `x ← CBS2(x) + CBS1(x)`, `repeats` times.
#[derive(Debug)]
pub struct DcelanPath<T: Element = f32> {
    pub channels: usize,
    pub units: Vec<(Cbs<T>, Cbs<T>)>,
}

impl<T: Element> DcelanPath<T> {
    pub fn new(channels: usize, repeats: usize, rng: &mut Rng) -> Self {
        let units = (0..repeats)
            .map(|_| {
                (
                    Cbs::new(CbsKind::Cbs2, channels, channels, rng),
                    Cbs::new(CbsKind::Cbs1, channels, channels, rng),
                )
            })
            .collect();
        Self { channels, units }
    }

    pub fn repeats(&self) -> usize {
        self.units.len()
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.dim(1) != self.channels {
            return Err(Error::ShapeMismatch {
                op: "dcelan_path",
                lhs: x.shape().to_vec(),
                rhs: vec![self.channels],
            });
        }
        let mut cur = x.clone();
        for (main, res) in &self.units {
            cur = main.forward(&cur, phase)?.add(&res.forward(&cur, phase)?)?;
        }
        Ok(cur)
    }
}

impl<T: Element> Module<T> for DcelanPath<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        for (i, (m, r)) in self.units.iter().enumerate() {
            m.visit(&join(prefix, &format!("{i}.main")), f);
            r.visit(&join(prefix, &format!("{i}.residual")), f);
        }
    }
}

/// `concat[up, path(skip)]` along channels.
pub fn decoder_fuse<T: Element>(up: &Tensor<T>, path: &DcelanPath<T>, skip: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
    if up.rank() != 4 || skip.rank() != 4 || up.shape()[2..] != skip.shape()[2..] || up.dim(0) != skip.dim(0) {
        return Err(Error::ShapeMismatch {
            op: "decoder_fuse",
            lhs: up.shape().to_vec(),
            rhs: skip.shape().to_vec(),
        });
    }
    Tensor::concat(&[up.clone(), path.forward(skip, phase)?], 1)
}

/// One decoder level: up-sample, fuse with the processed skip, aggregate,
/// and add a CBS1 projection of the up-sampled map.
#[derive(Debug)]
pub struct DecoderStage<T: Element = f32> {
    pub up: UpSample<T>,
    pub path: DcelanPath<T>,
    pub block: AggBlock<T>,
    pub residual: Cbs<T>,
}

impl<T: Element> DecoderStage<T> {
    pub fn new(kind: BlockKind, c_in: usize, c_out: usize, repeats: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            up: UpSample::new(c_in, c_out, rng)?,
            path: DcelanPath::new(c_out, repeats, rng),
            block: AggBlock::new(kind, 2 * c_out, c_out, rng)?,
            residual: Cbs::new(CbsKind::Cbs1, c_out, c_out, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, skip: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let up = self.up.forward(x, phase)?;
        let fused = decoder_fuse(&up, &self.path, skip, phase)?;
        self.block.forward(&fused, phase)?.add(&self.residual.forward(&up, phase)?)
    }
}

impl<T: Element> Module<T> for DecoderStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        self.up.visit(&join(prefix, "up"), f);
        self.path.visit(&join(prefix, "path"), f);
        self.block.visit(&join(prefix, "block"), f);
        self.residual.visit(&join(prefix, "residual"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{named_tensors, parameters};
    use crate::testutil::{fill, randn};

    fn zero_convs<M: Module<f64>>(m: &M) {
        for (n, t, _) in named_tensors(m) {
            if n.ends_with("conv.weight") {
                fill(&t, 0.0);
            }
        }
    }

    #[test]
    fn zero_repeats_is_identity() {
        let mut r = Rng::new(0);
        let p = DcelanPath::<f64>::new(3, 0, &mut r);
        let x = randn(&mut r, &[1, 3, 4, 4]);
        assert!(p.forward(&x, Phase::Train).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn path_shape_and_zero_weights() {
        let mut r = Rng::new(1);
        let p = DcelanPath::<f64>::new(4, 3, &mut r);
        let x = randn(&mut r, &[1, 4, 5, 5]);
        assert_eq!(p.forward(&x, Phase::Eval).unwrap().shape(), x.shape());
        zero_convs(&p);
        let y = p.forward(&x, Phase::Eval).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
        assert!(p.forward(&randn(&mut r, &[1, 3, 5, 5]), Phase::Eval).is_err());
    }

    #[test]
    fn fuse_shapes_and_zero_skip() {
        let mut r = Rng::new(2);
        let p = DcelanPath::<f32>::new(128, 2, &mut r);
        let up = Tensor::<f32>::ones(&[1, 128, 32, 32]);
        let y = decoder_fuse(&up, &p, &Tensor::zeros(&[1, 128, 32, 32]), Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 256, 32, 32]);
        let top = y.narrow(1, 0, 128).unwrap();
        assert!(top.bitwise_eq(&up));
        // zero skip through eval-mode units: each unit emits silu(beta) + silu(beta) = 0
        assert!(y.narrow(1, 128, 128).unwrap().to_vec().iter().all(|&v| v == 0.0));
        assert!(decoder_fuse(&up, &p, &Tensor::zeros(&[1, 128, 16, 16]), Phase::Eval).is_err());
    }

    #[test]
    fn stage_residual_survives_zeroed_block() {
        let mut r = Rng::new(3);
        let s = DecoderStage::<f64>::new(BlockKind::Dcelan, 4, 2, 1, &mut r).unwrap();
        zero_convs(&s.block);
        let x = randn(&mut r, &[1, 4, 3, 3]);
        let skip = randn(&mut r, &[1, 2, 6, 6]);
        let y = s.forward(&x, &skip, Phase::Eval).unwrap();
        let up = s.up.forward(&x, Phase::Eval).unwrap();
        let want = s.residual.forward(&up, Phase::Eval).unwrap();
        for (a, b) in y.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stage_gradients_reach_everything() {
        let mut r = Rng::new(4);
        let s = DecoderStage::<f64>::new(BlockKind::Dcelan, 4, 2, 2, &mut r).unwrap();
        let x = randn(&mut r, &[2, 4, 2, 2]);
        let skip = randn(&mut r, &[2, 2, 4, 4]);
        let proj = randn(&mut r, &[2, 2, 4, 4]);
        s.forward(&x, &skip, Phase::Train).unwrap().mul(&proj).unwrap().sum_all().backward().unwrap();
        for p in parameters(&s) {
            assert!(p.grad_norm() > 0.0);
        }
    }
}
