use crate::error::Result;
use crate::nn::{join, BatchNorm2d, Conv2d, Module, ParamKind, Phase};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CbsKind {
    /// 1×1, stride 1.
    Cbs1,
    /// 3×3, stride 1, padding 1.
    Cbs2,
    /// 3×3, stride 2, padding 1.
    Cbs3,
}

impl CbsKind {
    pub fn kernel(self) -> usize {
        match self {
            CbsKind::Cbs1 => 1,
            CbsKind::Cbs2 | CbsKind::Cbs3 => 3,
        }
    }

    pub fn stride(self) -> usize {
        match self {
            CbsKind::Cbs3 => 2,
            _ => 1,
        }
    }
}

/// Convolution → batch norm → SiLU.
#[derive(Debug)]
pub struct Cbs<T: Element = f32> {
    pub kind: CbsKind,
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Element> Cbs<T> {
    pub fn new(kind: CbsKind, c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        Self {
            kind,
            conv: Conv2d::new(c_in, c_out, kind.kernel(), kind.stride(), false, rng),
            bn: BatchNorm2d::new(c_out),
        }
    }

    pub fn c_in(&self) -> usize {
        self.conv.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out()
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        Ok(self.bn.forward(&self.conv.forward(x)?, phase)?.silu())
    }
}

impl<T: Element> Module<T> for Cbs<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}
