use super::cbs::{Cbs, CbsKind};
use crate::error::{Error, Result};
use crate::nn::{join, Module, ParamKind, Phase};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Single CBS2 chain.
    Elan,
    /// Two CBS2 chains plus a 1×1 residual projection of the input.
    Dcelan,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Elan => "elan",
            BlockKind::Dcelan => "dcelan",
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "elan" => Ok(BlockKind::Elan),
            "dcelan" => Ok(BlockKind::Dcelan),
            _ => Err(Error::Config(format!("unknown block kind `{s}` (expected elan or dcelan)"))),
        }
    }
}

/// Units per chain; taps are read after units 2 and 4.
pub const CHAIN_LEN: usize = 4;
const TAPS: [usize; 2] = [1, 3];

/// Layer-aggregation block. The stem halves the channels, each chain of
/// CBS2 units contributes two taps, and a CBS1 fuses the concatenation
/// back to `c_out`.
#[derive(Debug)]
pub struct AggBlock<T: Element = f32> {
    pub kind: BlockKind,
    pub stem: Cbs<T>,
    pub branch_a: Vec<Cbs<T>>,
    pub branch_b: Vec<Cbs<T>>,
    pub residual: Option<Cbs<T>>,
    pub fuse: Cbs<T>,
}

impl<T: Element> AggBlock<T> {
    pub fn new(kind: BlockKind, c_in: usize, c_out: usize, rng: &mut Rng) -> Result<Self> {
        if c_in == 0 || c_in % 2 != 0 {
            return Err(Error::Config(format!("aggregation block needs an even channel count, got {c_in}")));
        }
        let h = c_in / 2;
        let stem = Cbs::new(CbsKind::Cbs1, c_in, h, rng);
        let chain = |rng: &mut Rng| (0..CHAIN_LEN).map(|_| Cbs::new(CbsKind::Cbs2, h, h, rng)).collect::<Vec<_>>();
        let branch_a = chain(rng);
        let (branch_b, residual) = match kind {
            BlockKind::Elan => (Vec::new(), None),
            BlockKind::Dcelan => (chain(rng), Some(Cbs::new(CbsKind::Cbs1, c_in, h, rng))),
        };
        let width = match kind {
            BlockKind::Elan => 3 * h,
            BlockKind::Dcelan => 6 * h,
        };
        Ok(Self {
            kind,
            stem,
            branch_a,
            branch_b,
            residual,
            fuse: Cbs::new(CbsKind::Cbs1, width, c_out, rng),
        })
    }

    pub fn c_in(&self) -> usize {
        self.stem.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.fuse.c_out()
    }

    /// Channels entering the fuse layer.
    pub fn concat_width(&self) -> usize {
        self.fuse.c_in()
    }

    fn run_chain(chain: &[Cbs<T>], h: &Tensor<T>, phase: Phase, taps: &mut Vec<Tensor<T>>) -> Result<()> {
        let mut cur = h.clone();
        for (i, unit) in chain.iter().enumerate() {
            cur = unit.forward(&cur, phase)?;
            if TAPS.contains(&i) {
                taps.push(cur.clone());
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.dim(1) != self.c_in() {
            return Err(Error::ShapeMismatch {
                op: self.kind.name(),
                lhs: x.shape().to_vec(),
                rhs: vec![self.c_in()],
            });
        }
        let h = self.stem.forward(x, phase)?;
        let mut parts = vec![h.clone()];
        Self::run_chain(&self.branch_a, &h, phase, &mut parts)?;
        if self.kind == BlockKind::Dcelan {
            Self::run_chain(&self.branch_b, &h, phase, &mut parts)?;
        }
        if let Some(r) = &self.residual {
            parts.push(r.forward(x, phase)?);
        }
        self.fuse.forward(&Tensor::concat(&parts, 1)?, phase)
    }
}

impl<T: Element> Module<T> for AggBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, u) in self.branch_a.iter().enumerate() {
            u.visit(&join(prefix, &format!("a{i}")), f);
        }
        for (i, u) in self.branch_b.iter().enumerate() {
            u.visit(&join(prefix, &format!("b{i}")), f);
        }
        if let Some(r) = &self.residual {
            r.visit(&join(prefix, "residual"), f);
        }
        self.fuse.visit(&join(prefix, "fuse"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{named_tensors, param_count, parameters};
    use crate::testutil::{fill, randn};

    #[test]
    fn shapes_and_widths() {
        let mut r = Rng::new(0);
        let d = AggBlock::<f32>::new(BlockKind::Dcelan, 16, 16, &mut r).unwrap();
        assert_eq!(d.concat_width(), 6 * 8);
        let y = d.forward(&Tensor::zeros(&[1, 16, 128, 128]), Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 16, 128, 128]);
        let e = AggBlock::<f32>::new(BlockKind::Elan, 32, 32, &mut r).unwrap();
        assert_eq!(e.concat_width(), 3 * 16);
        let y = e.forward(&Tensor::zeros(&[1, 32, 64, 64]), Phase::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 32, 64, 64]);
        assert!(AggBlock::<f32>::new(BlockKind::Dcelan, 5, 4, &mut r).is_err());
    }

    #[test]
    fn elan_is_smaller() {
        let mut r = Rng::new(1);
        let d = AggBlock::<f32>::new(BlockKind::Dcelan, 32, 32, &mut r).unwrap();
        let e = AggBlock::<f32>::new(BlockKind::Elan, 32, 32, &mut r).unwrap();
        assert!(param_count(&e) < param_count(&d));
    }

    #[test]
    fn zero_weights_give_constant_map() {
        let mut r = Rng::new(2);
        let d = AggBlock::<f64>::new(BlockKind::Dcelan, 4, 4, &mut r).unwrap();
        for (n, t, _) in named_tensors(&d) {
            if n.ends_with("conv.weight") {
                fill(&t, 0.0);
            }
        }
        fill(&d.fuse.bn.beta, 0.3);
        let y = d.forward(&randn(&mut r, &[2, 4, 5, 5]), Phase::Eval).unwrap().to_vec();
        let want = 0.3 / (1.0 + (-0.3f64).exp());
        assert!(y.iter().all(|v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn second_branch_changes_output() {
        let mut r = Rng::new(3);
        let d = AggBlock::<f64>::new(BlockKind::Dcelan, 4, 4, &mut r).unwrap();
        let e = AggBlock::<f64>::new(BlockKind::Elan, 4, 4, &mut r).unwrap();
        e.stem.conv.weight.set_data(&d.stem.conv.weight.to_vec()).unwrap();
        for (u, v) in e.branch_a.iter().zip(&d.branch_a) {
            u.conv.weight.set_data(&v.conv.weight.to_vec()).unwrap();
        }
        let x = randn(&mut r, &[1, 4, 6, 6]);
        let (yd, ye) = (d.forward(&x, Phase::Train).unwrap(), e.forward(&x, Phase::Train).unwrap());
        assert!(yd.to_vec().iter().zip(ye.to_vec()).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let mut r = Rng::new(4);
        let d = AggBlock::<f64>::new(BlockKind::Dcelan, 4, 6, &mut r).unwrap();
        let x = randn(&mut r, &[2, 4, 6, 6]);
        let proj = randn(&mut r, &[2, 6, 6, 6]);
        d.forward(&x, Phase::Train).unwrap().mul(&proj).unwrap().sum_all().backward().unwrap();
        for p in parameters(&d) {
            assert!(p.grad_norm() > 0.0);
        }
    }
}
