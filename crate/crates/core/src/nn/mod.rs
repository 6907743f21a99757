//! Layers with owned parameters, plus the differentiable kernels they use.

pub mod attention;
pub mod functional;
pub mod layers;

pub use attention::{Mlp, MultiHeadAttention, TransformerBlock};
pub use layers::{BatchNorm2d, Conv2d, LayerNorm, Linear};

use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Forward-pass mode. Affects batch norm only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    pub fn is_train(self) -> bool {
        self == Phase::Train
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state such as batch-norm running statistics.
    Buffer,
}

/// Walks named tensors in a fixed, deterministic order.
pub trait Module<T: Element> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind));
}

/// `prefix.name`, or `name` when the prefix is empty.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Every named tensor, buffers included.
pub fn named_tensors<T: Element, M: Module<T> + ?Sized>(m: &M) -> Vec<(String, Tensor<T>, ParamKind)> {
    let mut out = Vec::new();
    m.visit("", &mut |n, t, k| out.push((n, t.clone(), k)));
    out
}

pub fn parameters<T: Element, M: Module<T> + ?Sized>(m: &M) -> Vec<Tensor<T>> {
    named_tensors(m)
        .into_iter()
        .filter(|(_, _, k)| *k == ParamKind::Trainable)
        .map(|(_, t, _)| t)
        .collect()
}

/// Number of trainable scalars.
pub fn param_count<T: Element, M: Module<T> + ?Sized>(m: &M) -> usize {
    parameters(m).iter().map(|t| t.numel()).sum()
}

pub fn zero_grads<T: Element, M: Module<T> + ?Sized>(m: &M) {
    parameters(m).iter().for_each(|t| t.zero_grad());
}

/// Kaiming-normal draw for a weight with the given fan-in.
pub fn kaiming_normal<T: Element>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = crate::tensor::numel(shape);
    let data = (0..n).map(|_| T::cast(rng.normal() * std)).collect();
    Tensor::parameter(data, shape).expect("shape matches data")
}

/// Xavier-uniform draw, `U(±√(6 / (fan_in + fan_out)))`.
pub fn xavier_uniform<T: Element>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = crate::tensor::numel(shape);
    let data = (0..n).map(|_| T::cast((2.0 * rng.uniform() - 1.0) * a)).collect();
    Tensor::parameter(data, shape).expect("shape matches data")
}
