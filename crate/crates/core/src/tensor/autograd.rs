use std::collections::{HashMap, HashSet};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// The recorded subgraph reachable from a root, in insertion order.
///
/// Every entry requires grad. Parents always precede children, so walking the
/// list backwards visits each node exactly once after all of its consumers.
pub struct Tape<T: Element> {
    nodes: Vec<Tensor<T>>,
}

impl<T: Element> Tape<T> {
    pub fn record(root: &Tensor<T>) -> Self {
        let mut nodes = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = t.node() {
                stack.extend(node.parents.iter().cloned());
            }
            nodes.push(t);
        }
        nodes.sort_by_key(|t| t.id());
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in insertion order (`None` for leaves).
    pub fn ops(&self) -> Vec<Option<&'static str>> {
        self.nodes.iter().map(|t| t.op_name()).collect()
    }

    /// Leaves that will receive gradient.
    pub fn leaves(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().filter(|t| t.is_leaf())
    }

    fn run(&self, root: &Tensor<T>, seed: Vec<T>) {
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(root.id(), seed);
        for t in self.nodes.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match t.node() {
                None => {
                    let mut slot = t.grad_lock();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => *slot = Some(g),
                    }
                }
                Some(node) => {
                    let needs: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
                    let grads = (node.backward)(&g, &needs);
                    debug_assert_eq!(grads.len(), node.parents.len(), "{}", node.op);
                    for ((p, gp), need) in node.parents.iter().zip(grads).zip(needs) {
                        let (Some(gp), true) = (gp, need) else {
                            continue;
                        };
                        debug_assert_eq!(gp.len(), p.numel(), "grad size from {}", node.op);
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&gp).for_each(|(a, b)| *a += *b),
                            None => {
                                pending.insert(p.id(), gp);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Accumulates d(self)/d(leaf) into every reachable leaf with
    /// `requires_grad`. Gradients add up across calls until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        Tape::record(self).run(self, vec![T::one()]);
        Ok(())
    }

    /// Backward with an explicit output gradient of the same shape.
    pub fn backward_with(&self, grad: &[T]) -> Result<()> {
        if grad.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "backward_with",
                lhs: self.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        if self.requires_grad() {
            Tape::record(self).run(self, grad.to_vec());
        }
        Ok(())
    }
}
