use super::layers::{LayerNorm, Linear};
use super::{join, xavier_uniform, Module, ParamKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Multi-head self-attention over `[B, N, D]` without masking or biases.
#[derive(Debug)]
pub struct MultiHeadAttention<T: Element = f32> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub heads: usize,
}

impl<T: Element> MultiHeadAttention<T> {
    pub fn new(d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model width {d} is not divisible by {heads} heads")));
        }
        let mut w = || xavier_uniform(&[d, d], d, d, rng);
        Ok(Self {
            w_q: w(),
            w_k: w(),
            w_v: w(),
            w_o: w(),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.dim(0)
    }

    fn split_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n, d) = (x.dim(0), x.dim(1), x.dim(2));
        x.reshape(&[b, n, self.heads, d / self.heads])?.permute(&[0, 2, 1, 3])
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        match *x.shape() {
            [_, _, d] if d == self.dim() => Ok(()),
            _ => Err(Error::ShapeMismatch {
                op: "attention",
                lhs: x.shape().to_vec(),
                rhs: self.w_q.shape().to_vec(),
            }),
        }
    }

    /// Attention probabilities `[B, heads, N, N]`.
    pub fn weights(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let q = self.split_heads(&x.matmul(&self.w_q)?)?;
        let k = self.split_heads(&x.matmul(&self.w_k)?)?;
        let scale = 1.0 / ((self.dim() / self.heads) as f64).sqrt();
        Ok(q.matmul(&k.transpose(2, 3)?)?.mul_scalar(scale).softmax())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let attn = self.weights(x)?;
        let v = self.split_heads(&x.matmul(&self.w_v)?)?;
        let (b, n, d) = (x.dim(0), x.dim(1), x.dim(2));
        attn.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?.matmul(&self.w_o)
    }
}

impl<T: Element> Module<T> for MultiHeadAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        for (n, t) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            f(join(prefix, n), t, ParamKind::Trainable);
        }
    }
}

/// `D → 4D → D` with GELU in between.
#[derive(Debug)]
pub struct Mlp<T: Element = f32> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> Mlp<T> {
    pub fn new(d: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(d, hidden, rng),
            fc2: Linear::new(hidden, d, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

impl<T: Element> Module<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

/// Pre-norm block: `z' = MSA(LN(x)) + x`, `out = MLP(LN(z')) + z'`.
#[derive(Debug)]
pub struct TransformerBlock<T: Element = f32> {
    pub ln1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ln2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Element> TransformerBlock<T> {
    pub fn new(d: usize, heads: usize, mlp_ratio: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(d, heads, rng)?,
            ln2: LayerNorm::new(d),
            mlp: Mlp::new(d, d * mlp_ratio, rng),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.attn.forward(&self.ln1.forward(x)?)?.add(x)?;
        self.mlp.forward(&self.ln2.forward(&z)?)?.add(&z)
    }
}

impl<T: Element> Module<T> for TransformerBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, ParamKind)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::parameters;
    use crate::tensor::{check_leaf, finite_diff_check, numel};

    fn randn(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec((0..numel(shape)).map(|_| r.normal()).collect(), shape).unwrap()
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut r = Rng::new(0);
        assert!(MultiHeadAttention::<f32>::new(10, 3, &mut r).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = Rng::new(1);
        let a = MultiHeadAttention::<f64>::new(8, 2, &mut r).unwrap();
        let w = a.weights(&randn(&mut r, &[2, 5, 8])).unwrap();
        assert_eq!(w.shape(), &[2, 2, 5, 5]);
        for row in w.to_vec().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut r = Rng::new(2);
        let a = MultiHeadAttention::<f64>::new(4, 2, &mut r).unwrap();
        let x = randn(&mut r, &[1, 1, 4]);
        let y = a.forward(&x).unwrap();
        let want = x.matmul(&a.w_v).unwrap().matmul(&a.w_o).unwrap();
        for (p, q) in y.to_vec().iter().zip(want.to_vec()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_output_projections_give_identity() {
        let mut r = Rng::new(3);
        let blk = TransformerBlock::<f64>::new(8, 2, 4, &mut r).unwrap();
        for t in [&blk.attn.w_o, &blk.mlp.fc2.weight, &blk.mlp.fc2.bias] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = randn(&mut r, &[2, 3, 8]);
        assert_eq!(blk.forward(&x).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn block_is_token_permutation_equivariant() {
        let mut r = Rng::new(4);
        let blk = TransformerBlock::<f64>::new(8, 2, 4, &mut r).unwrap();
        let x = randn(&mut r, &[1, 4, 8]);
        let perm = [2usize, 0, 3, 1];
        let xp = x.batch_gather(&[perm.to_vec()]).unwrap();
        let y = blk.forward(&x).unwrap().batch_gather(&[perm.to_vec()]).unwrap();
        let yp = blk.forward(&xp).unwrap();
        for (a, b) in y.to_vec().iter().zip(yp.to_vec()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn block_gradients() {
        let mut r = Rng::new(5);
        let blk = TransformerBlock::<f64>::new(4, 2, 2, &mut r).unwrap();
        let x = randn(&mut r, &[1, 3, 4]);
        let proj = randn(&mut r, &[1, 3, 4]);
        let loss = |v: &Tensor<f64>| blk.forward(v).unwrap().mul(&proj).unwrap().sum_all();
        let rep = finite_diff_check(loss, &x, 1e-6).unwrap();
        assert!(rep.max_rel_err < 1e-5, "{}", rep.max_rel_err);
        for p in parameters(&blk) {
            let rep = check_leaf(|| loss(&x), &p, 1e-6).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{:?}: {}", p.shape(), rep.max_rel_err);
        }
    }
}
