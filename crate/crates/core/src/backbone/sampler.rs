use super::cbs::{Cbs, CbsKind};
use crate::error::{Error, Result};
use crate::nn::functional::{max_pool2d, upsample2x};
use crate::nn::{join, Module, ParamKind, Phase};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

fn even_split(op: &str, c_out: usize) -> Result<usize> {
    if c_out == 0 || c_out % 2 != 0 {
        return Err(Error::Config(format!("{op} needs an even output channel count, got {c_out}")));
    }
    Ok(c_out / 2)
}

/// Halves H and W: `concat[CBS1(maxpool(x)), CBS3(CBS1(x))]`.
#[derive(Debug)]
pub struct DownSample<T: Element = f32> {
    pub pool_proj: Cbs<T>,
    pub conv_proj: Cbs<T>,
    pub conv_down: Cbs<T>,
}

impl<T: Element> DownSample<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Result<Self> {
        let h = even_split("down-sampler", c_out)?;
        Ok(Self {
            pool_proj: Cbs::new(CbsKind::Cbs1, c_in, h, rng),
            conv_proj: Cbs::new(CbsKind::Cbs1, c_in, h, rng),
            conv_down: Cbs::new(CbsKind::Cbs3, h, h, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let a = self.pool_proj.forward(&max_pool2d(x)?, phase)?;
        let b = self.conv_down.forward(&self.conv_proj.forward(x, phase)?, phase)?;
        Tensor::concat(&[a, b], 1)
    }
}

impl<T: Element> Module<T> for DownSample<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        self.pool_proj.visit(&join(prefix, "pool_proj"), f);
        self.conv_proj.visit(&join(prefix, "conv_proj"), f);
        self.conv_down.visit(&join(prefix, "conv_down"), f);
    }
}

/// Doubles H and W: `u = bilinear×2(x)`, then `concat[CBS2(u), CBS1(u)]`.
#[derive(Debug)]
pub struct UpSample<T: Element = f32> {
    pub branch_a: Cbs<T>,
    pub branch_b: Cbs<T>,
}

impl<T: Element> UpSample<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Result<Self> {
        let h = even_split("up-sampler", c_out)?;
        Ok(Self {
            branch_a: Cbs::new(CbsKind::Cbs2, c_in, h, rng),
            branch_b: Cbs::new(CbsKind::Cbs1, c_in, h, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let u = upsample2x(x)?;
        Tensor::concat(&[self.branch_a.forward(&u, phase)?, self.branch_b.forward(&u, phase)?], 1)
    }
}

impl<T: Element> Module<T> for UpSample<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        self.branch_a.visit(&join(prefix, "a"), f);
        self.branch_b.visit(&join(prefix, "b"), f);
    }
}
