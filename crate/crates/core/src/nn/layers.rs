use super::functional::{self, BatchNormArgs};
use super::{join, kaiming_normal, xavier_uniform, Module, ParamKind, Phase};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug)]
pub struct Conv2d<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2d<T> {
    /// Square `k`×`k` convolution. Padding is `k / 2`, so stride 1 keeps the
    /// spatial size and stride 2 halves even sizes.
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool, rng: &mut Rng) -> Self {
        let fan_in = c_in * k * k;
        Self {
            weight: kaiming_normal(&[c_out, c_in, k, k], fan_in, rng),
            bias: bias.then(|| Tensor::zeros(&[c_out]).requires_grad_(true)),
            stride,
            padding: k / 2,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        functional::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }
}

#[derive(Debug)]
pub struct BatchNorm2d<T: Element = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[c]).requires_grad_(true),
            beta: Tensor::zeros(&[c]).requires_grad_(true),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::ones(&[c]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        functional::batch_norm(
            x,
            BatchNormArgs {
                gamma: &self.gamma,
                beta: &self.beta,
                running_mean: &self.running_mean,
                running_var: &self.running_var,
                momentum: self.momentum,
                eps: self.eps,
                train: phase.is_train(),
            },
        )
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        f(join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(join(prefix, "beta"), &self.beta, ParamKind::Trainable);
        f(join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }
}

/// `y = x W + b` over the last axis, with `W: [d_in, d_out]`.
#[derive(Debug)]
pub struct Linear<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: xavier_uniform(&[d_in, d_out], d_in, d_out, rng),
            bias: Tensor::zeros(&[d_out]).requires_grad_(true),
        }
    }

    pub fn d_out(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().last() != Some(&self.weight.dim(0)) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        f(join(prefix, "bias"), &self.bias, ParamKind::Trainable);
    }
}

#[derive(Debug)]
pub struct LayerNorm<T: Element = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[d]).requires_grad_(true),
            beta: Tensor::zeros(&[d]).requires_grad_(true),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        functional::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

impl<T: Element> Module<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        f(join(prefix, "gamma"), &self.gamma, ParamKind::Trainable);
        f(join(prefix, "beta"), &self.beta, ParamKind::Trainable);
    }
}
