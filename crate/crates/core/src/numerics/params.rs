use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable array with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamLeaf {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of parameter leaves keyed by a stable path.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    leaves: Vec<ParamLeaf>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let id = id.into();
        if self.by_name.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("duplicate parameter id {id}")));
        }
        let pid = ParamId(self.leaves.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(id.clone(), pid);
        self.leaves.push(ParamLeaf { id, value, grad });
        Ok(pid)
    }

    pub fn get(&self, id: &str) -> Option<ParamId> {
        self.by_name.get(id).copied()
    }

    pub fn leaf(&self, pid: ParamId) -> &ParamLeaf {
        &self.leaves[pid.0]
    }

    pub fn leaf_mut(&mut self, pid: ParamId) -> &mut ParamLeaf {
        &mut self.leaves[pid.0]
    }

    pub fn value(&self, pid: ParamId) -> &Tensor {
        &self.leaves[pid.0].value
    }

    pub fn leaves(&self) -> &[ParamLeaf] {
        &self.leaves
    }

    pub fn leaves_mut(&mut self) -> &mut [ParamLeaf] {
        &mut self.leaves
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.leaves.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.leaves.iter().map(|l| l.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for leaf in &mut self.leaves {
            leaf.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `scale * grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (i, g) in grads.leaves.iter().enumerate() {
            let acc = self.leaves[i].grad.data_mut();
            match g {
                LeafGrad::None => {}
                LeafGrad::Dense(d) => {
                    for (a, v) in acc.iter_mut().zip(d) {
                        *a += scale * v;
                    }
                }
                LeafGrad::Rows { cols, rows } => {
                    for (&r, vals) in rows {
                        let dst = &mut acc[r * cols..(r + 1) * cols];
                        for (a, v) in dst.iter_mut().zip(vals) {
                            *a += scale * v;
                        }
                    }
                }
            }
        }
    }

    /// Zeroes the accumulators, then stores `grads` in them.
    pub fn load_grads(&mut self, grads: &Gradients) {
        self.zero_grads();
        self.accumulate(grads, 1.0);
    }
}

/// Gradient of one leaf from a single backward pass.
#[derive(Clone, Debug, Default)]
pub enum LeafGrad {
    #[default]
    None,
    Dense(Vec<f64>),
    /// Row-sparse gradient of an embedding table.
    Rows {
        cols: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

/// Per-leaf gradients produced by [`Tape::backward`](super::Tape::backward).
#[derive(Clone, Debug)]
pub struct Gradients {
    pub(crate) leaves: Vec<LeafGrad>,
}

impl Gradients {
    pub(crate) fn new(n: usize) -> Self {
        Gradients {
            leaves: vec![LeafGrad::None; n],
        }
    }

    pub fn leaf(&self, pid: ParamId) -> &LeafGrad {
        &self.leaves[pid.0]
    }

    /// Dense copy of one leaf's gradient (zeros where untouched).
    pub fn dense(&self, store: &ParamStore, pid: ParamId) -> Vec<f64> {
        let n = store.value(pid).len();
        let mut out = vec![0.0; n];
        match &self.leaves[pid.0] {
            LeafGrad::None => {}
            LeafGrad::Dense(d) => out.copy_from_slice(d),
            LeafGrad::Rows { cols, rows } => {
                for (&r, vals) in rows {
                    out[r * cols..(r + 1) * cols].copy_from_slice(vals);
                }
            }
        }
        out
    }

    pub(crate) fn add_dense(&mut self, pid: ParamId, g: Vec<f64>) {
        let slot = &mut self.leaves[pid.0];
        match slot {
            LeafGrad::None => *slot = LeafGrad::Dense(g),
            LeafGrad::Dense(d) => d.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            LeafGrad::Rows { cols, rows } => {
                let cols = *cols;
                let mut d = g;
                for (&r, vals) in rows.iter() {
                    for (a, b) in d[r * cols..(r + 1) * cols].iter_mut().zip(vals) {
                        *a += b;
                    }
                }
                *slot = LeafGrad::Dense(d);
            }
        }
    }

    pub(crate) fn add_row(&mut self, pid: ParamId, cols: usize, row: usize, g: &[f64]) {
        let slot = &mut self.leaves[pid.0];
        match slot {
            LeafGrad::None => {
                let mut rows = BTreeMap::new();
                rows.insert(row, g.to_vec());
                *slot = LeafGrad::Rows { cols, rows };
            }
            LeafGrad::Dense(d) => {
                for (a, b) in d[row * cols..(row + 1) * cols].iter_mut().zip(g) {
                    *a += b;
                }
            }
            LeafGrad::Rows { rows, .. } => {
                let dst = rows.entry(row).or_insert_with(|| vec![0.0; cols]);
                dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
}
