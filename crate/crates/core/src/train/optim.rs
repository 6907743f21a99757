use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-epoch cosine annealing from `lr0` at epoch 0 toward 0 at `total`.
pub fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 + (PI * epoch as f64 / total as f64).cos()) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter name in the
/// parameter dtype so they survive a checkpoint round trip exactly; the
/// update itself is computed in f64.
#[derive(Debug, Clone)]
pub struct Adam<T: Element> {
    pub hp: AdamParams,
    /// Updates applied so far.
    pub step: u64,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

pub const OPTIM_PREFIX: &str = "optim.";

impl<T: Element> Adam<T> {
    pub fn new(hp: AdamParams) -> Self {
        Self {
            hp,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// One update of every parameter that holds a gradient. Parameters
    /// without a gradient are left untouched, moments included.
    pub fn update(&mut self, params: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamParams { beta1, beta2, eps } = self.hp;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (name, p) in params {
            let Some(g) = p.grad() else { continue };
            let n = p.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            if m.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: vec![m.len()],
                    rhs: p.shape().to_vec(),
                });
            }
            let mut data = p.data_mut();
            for i in 0..n {
                let gi = g[i].f64();
                let mi = beta1 * m[i].f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].f64() + (1.0 - beta2) * gi * gi;
                m[i] = T::cast(mi);
                v[i] = T::cast(vi);
                let m_hat = m[i].f64() / c1;
                let v_hat = v[i].f64() / c2;
                data[i] = T::cast(data[i].f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }

    /// Moments as named tensors `optim.<param>.m` / `optim.<param>.v`,
    /// sorted by name.
    pub fn state_tensors(&self) -> Result<Vec<(String, Tensor<T>)>> {
        let mut names: Vec<&String> = self.moments.keys().collect();
        names.sort();
        let mut out = Vec::with_capacity(2 * names.len());
        for name in names {
            let (m, v) = &self.moments[name];
            out.push((format!("{OPTIM_PREFIX}{name}.m"), Tensor::from_vec(m.clone(), &[m.len()])?));
            out.push((format!("{OPTIM_PREFIX}{name}.v"), Tensor::from_vec(v.clone(), &[v.len()])?));
        }
        Ok(out)
    }

    /// Rebuilds moments from the output of [`Adam::state_tensors`].
    pub fn load_state(&mut self, step: u64, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let mut moments: HashMap<String, (Vec<T>, Vec<T>)> = HashMap::new();
        for (name, t) in entries {
            let Some(rest) = name.strip_prefix(OPTIM_PREFIX) else { continue };
            let (param, which) = rest
                .rsplit_once('.')
                .ok_or_else(|| Error::Checkpoint(format!("malformed optimizer entry `{name}`")))?;
            let slot = moments.entry(param.to_string()).or_default();
            match which {
                "m" => slot.0 = t.to_vec(),
                "v" => slot.1 = t.to_vec(),
                _ => return Err(Error::Checkpoint(format!("malformed optimizer entry `{name}`"))),
            }
        }
        if let Some((p, _)) = moments.iter().find(|(_, (m, v))| m.len() != v.len()) {
            return Err(Error::Checkpoint(format!("optimizer moments for `{p}` are incomplete")));
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }
}
