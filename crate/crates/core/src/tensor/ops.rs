use super::gemm::{gemm, MatRef};
use super::{numel, strides, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Strides of `b` laid over `a`'s index space, 0 on broadcast dims.
///
/// `b` is aligned to the trailing axes of `a`; each of its dims must equal
/// the matching dim of `a` or be 1.
fn broadcast_strides(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if b.len() > a.len() {
        return Err(mismatch());
    }
    let off = a.len() - b.len();
    let bs = strides(b);
    let mut out = vec![0; a.len()];
    for (j, (&db, &sb)) in b.iter().zip(&bs).enumerate() {
        let da = a[off + j];
        if db == da {
            out[off + j] = if db == 1 { 0 } else { sb };
        } else if db == 1 {
            out[off + j] = 0;
        } else {
            return Err(mismatch());
        }
    }
    Ok(out)
}

/// Calls `f(i, j)` for every flat index `i` of `shape` with `j` the offset
/// given by `sub_strides`.
pub(crate) fn for_each_strided(shape: &[usize], sub_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..n {
        f(i, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += sub_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= sub_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

enum Layout {
    Same,
    Cycle(usize),
    Strided(Vec<usize>),
}

fn layout(a: &[usize], b: &[usize], bs: Vec<usize>) -> Layout {
    if a == b {
        Layout::Same
    } else if a.ends_with(b) {
        Layout::Cycle(numel(b))
    } else {
        // leading 1s in b still give a plain cycle
        let trimmed: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
        if !trimmed.is_empty() && a.ends_with(&trimmed) {
            Layout::Cycle(numel(&trimmed))
        } else if trimmed.is_empty() {
            Layout::Cycle(1)
        } else {
            Layout::Strided(bs)
        }
    }
}

/// Expands `b` over `a_shape`.
fn expand<T: Element>(a_shape: &[usize], lay: &Layout, b: &[T]) -> Vec<T> {
    let n = numel(a_shape);
    match lay {
        Layout::Same => b.to_vec(),
        Layout::Cycle(m) => (0..n).map(|i| b[i % m]).collect(),
        Layout::Strided(bs) => {
            let mut out = Vec::with_capacity(n);
            for_each_strided(a_shape, bs, |_, j| out.push(b[j]));
            out
        }
    }
}

/// Sums a full-size gradient down to `b`'s size.
fn reduce_to<T: Element>(a_shape: &[usize], lay: &Layout, g: &[T], b_len: usize) -> Vec<T> {
    match lay {
        Layout::Same => g.to_vec(),
        Layout::Cycle(m) => {
            let mut out = vec![T::zero(); b_len];
            for chunk in g.chunks(*m) {
                out.iter_mut().zip(chunk).for_each(|(o, v)| *o += *v);
            }
            out
        }
        Layout::Strided(bs) => {
            let mut out = vec![T::zero(); b_len];
            for_each_strided(a_shape, bs, |i, j| out[j] += g[i]);
            out
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Elementwise binary op; `rhs` broadcasts over `self` by the
    /// trailing-axes rule (dims equal or 1).
    pub fn binary(&self, op: BinaryOp, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let a_shape = self.shape().to_vec();
        let bs = broadcast_strides(name, &a_shape, rhs.shape())?;
        let lay = layout(&a_shape, rhs.shape(), bs);
        let out = {
            let a = self.data();
            let b = rhs.data();
            let f = |x: T, y: T| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
            };
            match &lay {
                Layout::Same => a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
                Layout::Cycle(m) => a.iter().enumerate().map(|(i, &x)| f(x, b[i % m])).collect(),
                Layout::Strided(bs) => {
                    let mut out = Vec::with_capacity(a.len());
                    for_each_strided(&a_shape, bs, |i, j| out.push(f(a[i], b[j])));
                    out
                }
            }
        };
        let (ta, tb) = (self.clone(), rhs.clone());
        let b_len = rhs.numel();
        let shape = a_shape.clone();
        Ok(Tensor::from_op(name, a_shape, out, vec![self.clone(), rhs.clone()], move |g, needs| {
            let ga = needs[0].then(|| match op {
                BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                BinaryOp::Mul => {
                    let bx = expand(&shape, &lay, &tb.data());
                    g.iter().zip(&bx).map(|(&g, &b)| g * b).collect()
                }
                BinaryOp::Div => {
                    let bx = expand(&shape, &lay, &tb.data());
                    g.iter().zip(&bx).map(|(&g, &b)| g / b).collect()
                }
            });
            let gb = needs[1].then(|| match op {
                BinaryOp::Add => reduce_to(&shape, &lay, g, b_len),
                BinaryOp::Sub => {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    reduce_to(&shape, &lay, &neg, b_len)
                }
                BinaryOp::Mul => {
                    let a = ta.data();
                    let prod: Vec<T> = g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect();
                    reduce_to(&shape, &lay, &prod, b_len)
                }
                BinaryOp::Div => {
                    let a = ta.data();
                    let bx = expand(&shape, &lay, &tb.data());
                    let d: Vec<T> = g
                        .iter()
                        .zip(a.iter())
                        .zip(&bx)
                        .map(|((&g, &a), &b)| -g * a / (b * b))
                        .collect();
                    reduce_to(&shape, &lay, &d, b_len)
                }
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(BinaryOp::Div, rhs)
    }

    /// Elementwise map with derivative `df` evaluated at the input.
    pub(crate) fn map_with_grad(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        Tensor::from_op(name, self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let xd = x.data();
            vec![Some(g.iter().zip(xd.iter()).map(|(&g, &x)| g * df(x)).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::cast(c);
        self.map_with_grad("add_scalar", move |x| x + c, |_| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::cast(c);
        self.map_with_grad("mul_scalar", move |x| x * c, move |_| c)
    }

    /// `c - self`.
    pub fn rsub_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::cast(c);
        self.map_with_grad("rsub_scalar", move |x| c - x, |_| -T::one())
    }

    pub fn neg(&self) -> Tensor<T> {
        self.map_with_grad("neg", |x| -x, |_| -T::one())
    }

    pub fn powf(&self, p: f64) -> Tensor<T> {
        let pt = T::cast(p);
        let pm1 = T::cast(p - 1.0);
        self.map_with_grad("pow", move |x| x.powf(pt), move |x| pt * x.powf(pm1))
    }

    pub fn square(&self) -> Tensor<T> {
        let two = T::cast(2.0);
        self.map_with_grad("square", |x| x * x, move |x| two * x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let half = T::cast(0.5);
        self.map_with_grad("sqrt", |x| x.sqrt(), move |x| half / x.sqrt())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map_with_grad("exp", |x| x.exp(), |x| x.exp())
    }

    pub fn ln(&self) -> Tensor<T> {
        self.map_with_grad("ln", |x| x.ln(), |x| x.recip())
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.map_with_grad("tanh", |x| x.tanh(), |x| {
            let t = x.tanh();
            T::one() - t * t
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map_with_grad("sigmoid", sigmoid, |x| {
            let s = sigmoid(x);
            s * (T::one() - s)
        })
    }

    /// `x·σ(x)`.
    pub fn silu(&self) -> Tensor<T> {
        self.map_with_grad("silu", |x| x * sigmoid(x), |x| {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        })
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Tensor<T> {
        self.map_with_grad(
            "gelu",
            |x| {
                let v = x.f64();
                T::cast(0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
            },
            |x| {
                let v = x.f64();
                let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                T::cast(cdf + v * pdf)
            },
        )
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = self.numel();
        Tensor::from_op("sum_all", vec![1], vec![s], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel();
        let inv = T::cast(1.0 / n as f64);
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v) * inv;
        Tensor::from_op("mean_all", vec![1], vec![s], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0] * inv; n])]
        })
    }

    /// Reduction over `axes`; reduced dims are dropped unless `keepdim`.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        let name = match op {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        };
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::InvalidAxis { op: name, axis: a, rank });
            }
            reduced[a] = true;
        }
        let kept_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let out_len = numel(&kept_shape);
        let ks = strides(&kept_shape);
        let sub: Vec<usize> = ks
            .iter()
            .zip(&reduced)
            .map(|(&s, &r)| if r { 0 } else { s })
            .collect();
        let count = (numel(&shape) / out_len) as f64;
        let out_shape = if keepdim {
            kept_shape.clone()
        } else {
            let s: Vec<usize> = shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect();
            if s.is_empty() {
                vec![1]
            } else {
                s
            }
        };
        let x = self.data();
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut out = vec![T::zero(); out_len];
                for_each_strided(&shape, &sub, |i, j| out[j] += x[i]);
                let scale = if op == ReduceOp::Mean { T::cast(1.0 / count) } else { T::one() };
                if op == ReduceOp::Mean {
                    out.iter_mut().for_each(|v| *v *= scale);
                }
                drop(x);
                Ok(Tensor::from_op(name, out_shape, out, vec![self.clone()], move |g, _| {
                    let mut gx = vec![T::zero(); numel(&shape)];
                    for_each_strided(&shape, &sub, |i, j| gx[i] = g[j] * scale);
                    vec![Some(gx)]
                }))
            }
            ReduceOp::Max => {
                let mut out = vec![T::neg_infinity(); out_len];
                let mut arg = vec![usize::MAX; out_len];
                for_each_strided(&shape, &sub, |i, j| {
                    if arg[j] == usize::MAX || x[i] > out[j] {
                        out[j] = x[i];
                        arg[j] = i;
                    }
                });
                let n = x.len();
                drop(x);
                Ok(Tensor::from_op(name, out_shape, out, vec![self.clone()], move |g, _| {
                    let mut gx = vec![T::zero(); n];
                    for (j, &i) in arg.iter().enumerate() {
                        gx[i] += g[j];
                    }
                    vec![Some(gx)]
                }))
            }
        }
    }

    pub fn sum(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Sum, axes, keepdim)
    }

    pub fn mean(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Mean, axes, keepdim)
    }

    pub fn max(&self, axes: &[usize], keepdim: bool) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Max, axes, keepdim)
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]`. The operand with
    /// fewer batch dims must match the trailing batch dims of the other.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (a_shape, b_shape) = (self.shape().to_vec(), rhs.shape().to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.clone(),
            rhs: b_shape.clone(),
        };
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (k2, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &a_shape[..a_shape.len() - 2];
        let bb = &b_shape[..b_shape.len() - 2];
        let batch_shape = if ba.len() >= bb.len() { ba } else { bb };
        if !batch_shape.ends_with(if ba.len() >= bb.len() { bb } else { ba }) {
            return Err(mismatch());
        }
        let (na, nb) = (numel(ba), numel(bb));
        let nbatch = numel(batch_shape);
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend([m, n]);

        let mut out = vec![T::zero(); nbatch * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            if nb == 1 {
                // fold the batch into rows
                gemm(
                    T::one(),
                    MatRef::row_major(&a, na * m, k),
                    MatRef::row_major(&b, k, n),
                    T::zero(),
                    &mut out[..na * m * n],
                );
            } else {
                for i in 0..nbatch {
                    let (ia, ib) = (i % na, i % nb);
                    gemm(
                        T::one(),
                        MatRef::row_major(&a[ia * m * k..(ia + 1) * m * k], m, k),
                        MatRef::row_major(&b[ib * k * n..(ib + 1) * k * n], k, n),
                        T::zero(),
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
        let (ta, tb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op("matmul", out_shape, out, vec![self.clone(), rhs.clone()], move |g, needs| {
            let a = ta.data();
            let b = tb.data();
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); na * m * k];
                if nb == 1 {
                    gemm(
                        T::one(),
                        MatRef::row_major(g, na * m, n),
                        MatRef::row_major(&b, k, n).t(),
                        T::zero(),
                        &mut ga,
                    );
                } else {
                    for i in 0..nbatch {
                        let (ia, ib) = (i % na, i % nb);
                        gemm(
                            T::one(),
                            MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::row_major(&b[ib * k * n..(ib + 1) * k * n], k, n).t(),
                            T::one(),
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                        );
                    }
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); nb * k * n];
                if nb == 1 {
                    gemm(
                        T::one(),
                        MatRef::row_major(&a, na * m, k).t(),
                        MatRef::row_major(g, na * m, n),
                        T::zero(),
                        &mut gb,
                    );
                } else {
                    for i in 0..nbatch {
                        let (ia, ib) = (i % na, i % nb);
                        gemm(
                            T::one(),
                            MatRef::row_major(&a[ia * m * k..(ia + 1) * m * k], m, k).t(),
                            MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                            T::one(),
                            &mut gb[ib * k * n..(ib + 1) * k * n],
                        );
                    }
                }
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor<T> {
        let d = *self.shape().last().expect("rank >= 1");
        let out = softmax_rows(&self.data(), d);
        let x = self.clone();
        Tensor::from_op("softmax", self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let y = softmax_rows(&x.data(), d);
            let mut gx = vec![T::zero(); y.len()];
            for ((yr, gr), gxr) in y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&y, &g)| acc + y * g);
                for ((o, &y), &g) in gxr.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            vec![Some(gx)]
        })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_rows<T: Element>(x: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        let m = xr.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        or.iter_mut().for_each(|o| *o = *o / s);
    }
    out
}
