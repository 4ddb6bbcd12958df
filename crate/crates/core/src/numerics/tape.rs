//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Nodes are appended in evaluation order, so a node's inputs always have
//! smaller indices and the backward sweep is a single reverse scan.

use std::hash::{Hash, Hasher};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather { table: ParamId, rows: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    AddRow { x: Var, row: Var },
    Mul(Var, Var),
    Scale { x: Var, s: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Ln(Var),
    Mask { x: Var, mask: Vec<f64> },
    RowDot { x: Var, v: Var },
    SoftmaxRows(Var),
    ScaleRows { x: Var, s: Var },
    Outer { s: Var, v: Var },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Repeat { x: Var, n: usize },
    SliceCols { x: Var, start: usize },
    SelectRow { x: Var, row: usize },
    MaskedMean { x: Var, mask: Vec<f64>, count: f64 },
    LstmStep { gates: Var, h: Var, c: Var, w_hh: Var, cache: Vec<f64> },
    Bce { p: Var, labels: Vec<f64>, eps: f64 },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    // `None` for parameter nodes; their value lives in the store.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward computation against a read-only [`ParamStore`].
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(pid)) => self.store.value(*pid),
            _ => unreachable!("node without value"),
        }
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        dims(self.value(v))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.needs(*v));
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        Error::Shape {
            op,
            left: vec![ar, ac],
            right: vec![br, bc],
        }
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        let (r, c) = dims(&value);
        let value = Tensor::from_parts(r, c, value.into_data());
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.input(Tensor::from_parts(rows, cols, vec![0.0; rows * cols]))
    }

    /// The node for a trainable leaf; repeated calls return the same node.
    pub fn param(&mut self, pid: ParamId) -> Var {
        if let Some(v) = self.param_vars[pid.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(pid),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[pid.0] = Some(v);
        v
    }

    /// Rows of an embedding table, stacked as `[rows.len(), d]`.
    pub fn gather(&mut self, table: ParamId, rows: &[usize]) -> Result<Var> {
        let t = self.store.value(table);
        let (n, d) = dims(t);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: r,
                    size: n,
                });
            }
            out.extend_from_slice(t.row_slice(r));
        }
        self.nodes.push(Node {
            value: Some(Tensor::from_parts(rows.len(), d, out)),
            op: Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            needs_grad: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.shape(x);
        let (dout, win) = self.shape(w);
        if din != win {
            return Err(self.shape_err("affine", w, x));
        }
        if let Some(b) = b {
            if self.value(b).len() != dout {
                return Err(self.shape_err("affine bias", w, b));
            }
        }
        let mut y = vec![0.0; n * dout];
        gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut y);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(dout) {
                row.iter_mut().zip(bv).for_each(|(a, b)| *a += b);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_parts(n, dout, y), Op::Linear { x, w, b }, &inputs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut y = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut y);
        Ok(self.push(Tensor::from_parts(m, n, y), Op::MatMul { a, b }, &[a, b]))
    }

    fn zip_same(&self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor::from_parts(r, c, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `x + row` with `row` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.value(row).len() != d {
            return Err(self.shape_err("add_row", x, row));
        }
        let rv = self.value(row).data();
        let mut y = self.value(x).data().to_vec();
        for r in y.chunks_mut(d) {
            r.iter_mut().zip(rv).for_each(|(a, b)| *a += b);
        }
        Ok(self.push(Tensor::from_parts(n, d, y), Op::AddRow { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (n, d) = self.shape(x);
        let y = self.value(x).data().iter().map(|v| v * s).collect();
        self.push(Tensor::from_parts(n, d, y), Op::Scale { x, s }, &[x])
    }

    fn map(&mut self, x: Var, f: fn(f64) -> f64) -> Tensor {
        let (n, d) = self.shape(x);
        Tensor::from_parts(n, d, self.value(x).data().iter().map(|v| f(*v)).collect())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(x), &[x])
    }

    /// Hash of the sign of every ReLU input recorded so far. Two
    /// evaluations with the same pattern lie on the same linear piece of
    /// every ReLU.
    pub fn relu_pattern(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for v in self.value(x).data() {
                    (*v > 0.0).hash(&mut h);
                }
            }
        }
        h.finish()
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::ln);
        self.push(t, Op::Ln(x), &[x])
    }

    /// Elementwise product with a fixed mask (used for dropout).
    pub fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let (n, d) = self.shape(x);
        if mask.len() != n * d {
            return Err(Error::Shape {
                op: "mask",
                left: vec![n, d],
                right: vec![mask.len()],
            });
        }
        let y = self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        Ok(self.push(Tensor::from_parts(n, d, y), Op::Mask { x, mask }, &[x]))
    }

    /// Per-row dot product with `v`: `[N, d] . [d] -> [N, 1]`.
    pub fn row_dot(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.value(v).len() != d {
            return Err(self.shape_err("row_dot", x, v));
        }
        let vv = self.value(v).data();
        let y = self
            .value(x)
            .data()
            .chunks(d)
            .map(|r| r.iter().zip(vv).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(Tensor::from_parts(n, 1, y), Op::RowDot { x, v }, &[x, v]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.shape(x);
        let mut y = Vec::with_capacity(n * d);
        for r in self.value(x).data().chunks(d) {
            y.extend(softmax_slice(r));
        }
        self.push(Tensor::from_parts(n, d, y), Op::SoftmaxRows(x), &[x])
    }

    /// Scales row `r` of `x` by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, d) = self.shape(x);
        if self.shape(s) != (n, 1) {
            return Err(self.shape_err("scale_rows", x, s));
        }
        let sv = self.value(s).data();
        let mut y = self.value(x).data().to_vec();
        for (r, row) in y.chunks_mut(d).enumerate() {
            row.iter_mut().for_each(|a| *a *= sv[r]);
        }
        Ok(self.push(Tensor::from_parts(n, d, y), Op::ScaleRows { x, s }, &[x, s]))
    }

    /// `s v^T` for a column `s: [N, 1]` and row `v: [1, d]`.
    pub fn outer(&mut self, s: Var, v: Var) -> Result<Var> {
        let (n, one) = self.shape(s);
        if one != 1 || self.shape(v).0 != 1 {
            return Err(self.shape_err("outer", s, v));
        }
        let d = self.value(v).len();
        let sv = self.value(s).data();
        let vv = self.value(v).data();
        let mut y = Vec::with_capacity(n * d);
        for a in sv {
            y.extend(vv.iter().map(|b| a * b));
        }
        Ok(self.push(Tensor::from_parts(n, d, y), Op::Outer { s, v }, &[s, v]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape(parts[0]).0;
        let mut width = 0;
        for &p in parts {
            if self.shape(p).0 != n {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            width += self.shape(p).1;
        }
        let mut y = Vec::with_capacity(n * width);
        for r in 0..n {
            for &p in parts {
                y.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::from_parts(n, width, y), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.shape(parts[0]).1;
        let mut n = 0;
        let mut y = Vec::new();
        for &p in parts {
            if self.shape(p).1 != d {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
            n += self.shape(p).0;
            y.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::from_parts(n, d, y), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Stacks `n` copies of a single-row `x`.
    pub fn repeat(&mut self, x: Var, n: usize) -> Result<Var> {
        let (r, d) = self.shape(x);
        if r != 1 {
            return Err(self.shape_err("repeat", x, x));
        }
        let row = self.value(x).data();
        let mut y = Vec::with_capacity(n * d);
        for _ in 0..n {
            y.extend_from_slice(row);
        }
        Ok(self.push(Tensor::from_parts(n, d, y), Op::Repeat { x, n }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.shape(x);
        if start + len > d {
            return Err(Error::Shape {
                op: "slice_cols",
                left: vec![n, d],
                right: vec![start, len],
            });
        }
        let v = self.value(x);
        let mut y = Vec::with_capacity(n * len);
        for r in 0..n {
            y.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        Ok(self.push(Tensor::from_parts(n, len, y), Op::SliceCols { x, start }, &[x]))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (n, d) = self.shape(x);
        if row >= n {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: row,
                size: n,
            });
        }
        let y = self.value(x).row_slice(row).to_vec();
        Ok(self.push(Tensor::from_parts(1, d, y), Op::SelectRow { x, row }, &[x]))
    }

    /// Mean of the rows of `x` selected by a 0/1 mask; zeros if none selected.
    pub fn masked_mean(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let (n, d) = self.shape(x);
        if mask.len() != n {
            return Err(Error::Shape {
                op: "masked_mean",
                left: vec![n, d],
                right: vec![mask.len()],
            });
        }
        let y = masked_mean(self.value(x).data(), d, mask)?;
        let count: f64 = mask.iter().sum();
        Ok(self.push(
            Tensor::from_parts(1, d, y),
            Op::MaskedMean {
                x,
                mask: mask.to_vec(),
                count,
            },
            &[x],
        ))
    }

    /// One LSTM update on precomputed input gates.
    ///
    /// `gates` is `x W_ih^T + b` (`[N, 4H]`, gate order i, f, g, o); returns
    /// `[N, 2H]` holding `[h | c]`.
    pub fn lstm_step(&mut self, gates: Var, h: Var, c: Var, w_hh: Var) -> Result<Var> {
        let (n, g4) = self.shape(gates);
        let hid = g4 / 4;
        if g4 != 4 * hid || self.shape(h) != (n, hid) || self.shape(c) != (n, hid) {
            return Err(self.shape_err("lstm_cell", gates, h));
        }
        if self.shape(w_hh) != (g4, hid) {
            return Err(self.shape_err("lstm_cell", w_hh, h));
        }
        let mut pre = self.value(gates).data().to_vec();
        gemm(n, hid, g4, self.value(h).data(), false, self.value(w_hh).data(), true, 1.0, &mut pre);
        let cv = self.value(c).data();
        // cache per row: activated i, f, g, o then tanh(c_new)
        let mut cache = vec![0.0; n * 5 * hid];
        let mut out = vec![0.0; n * 2 * hid];
        for r in 0..n {
            let p = &pre[r * g4..(r + 1) * g4];
            let k = &mut cache[r * 5 * hid..(r + 1) * 5 * hid];
            for j in 0..hid {
                let i = sigmoid(p[j]);
                let f = sigmoid(p[hid + j]);
                let g = p[2 * hid + j].tanh();
                let o = sigmoid(p[3 * hid + j]);
                let c_new = f * cv[r * hid + j] + i * g;
                let tc = c_new.tanh();
                k[j] = i;
                k[hid + j] = f;
                k[2 * hid + j] = g;
                k[3 * hid + j] = o;
                k[4 * hid + j] = tc;
                out[r * 2 * hid + j] = o * tc;
                out[r * 2 * hid + hid + j] = c_new;
            }
        }
        Ok(self.push(
            Tensor::from_parts(n, 2 * hid, out),
            Op::LstmStep {
                gates,
                h,
                c,
                w_hh,
                cache,
            },
            &[gates, h, c, w_hh],
        ))
    }

    /// Summed binary cross-entropy of probabilities `p: [N, 1]` against 0/1
    /// labels, with probabilities clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, labels: &[f64], eps: f64) -> Result<Var> {
        let pv = self.value(p).data();
        if labels.is_empty() {
            return Err(Error::InvalidArgument("cross-entropy over zero candidates".into()));
        }
        if pv.len() != labels.len() {
            return Err(Error::Shape {
                op: "bce",
                left: vec![pv.len()],
                right: vec![labels.len()],
            });
        }
        let loss = bce(labels, pv, eps)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
                eps,
            },
            &[p],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Gradients of a scalar `root` with respect to every parameter leaf it
    /// depends on. The tape is left untouched, so repeated calls agree.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            let (r, c) = self.shape(root);
            return Err(Error::Shape {
                op: "backward (root must be scalar)",
                left: vec![r, c],
                right: vec![1, 1],
            });
        }
        let mut out = Gradients::new(self.store.len());
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, grads: &mut Vec<Option<Vec<f64>>>| -> Option<usize> {
                if !self.nodes[v.0].needs_grad {
                    return None;
                }
                if grads[v.0].is_none() {
                    grads[v.0] = Some(vec![0.0; self.value(v).len()]);
                }
                Some(v.0)
            };
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => out.add_dense(*pid, g),
                Op::Gather { table, rows } => {
                    let d = self.store.value(*table).cols();
                    for (i, &r) in rows.iter().enumerate() {
                        out.add_row(*table, d, r, &g[i * d..(i + 1) * d]);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (n, din) = self.shape(*x);
                    let dout = self.shape(*w).0;
                    if let Some(i) = acc(*x, &mut grads) {
                        let dx = grads[i].as_mut().unwrap();
                        gemm(n, dout, din, &g, false, self.value(*w).data(), false, 1.0, dx);
                    }
                    if let Some(i) = acc(*w, &mut grads) {
                        let dw = grads[i].as_mut().unwrap();
                        gemm(dout, n, din, &g, true, self.value(*x).data(), false, 1.0, dw);
                    }
                    if let Some(b) = b {
                        if let Some(i) = acc(*b, &mut grads) {
                            let db = grads[i].as_mut().unwrap();
                            for row in g.chunks(dout) {
                                db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    if let Some(i) = acc(*a, &mut grads) {
                        let da = grads[i].as_mut().unwrap();
                        gemm(m, n, k, &g, false, self.value(*b).data(), true, 1.0, da);
                    }
                    if let Some(i) = acc(*b, &mut grads) {
                        let db = grads[i].as_mut().unwrap();
                        gemm(k, m, n, self.value(*a).data(), true, &g, false, 1.0, db);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(i) = acc(*v, &mut grads) {
                            add_into(grads[i].as_mut().unwrap(), &g);
                        }
                    }
                }
                Op::AddRow { x, row } => {
                    if let Some(i) = acc(*x, &mut grads) {
                        add_into(grads[i].as_mut().unwrap(), &g);
                    }
                    if let Some(i) = acc(*row, &mut grads) {
                        let d = self.shape(*x).1;
                        let dr = grads[i].as_mut().unwrap();
                        for r in g.chunks(d) {
                            add_into(dr, r);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(i) = acc(*a, &mut grads) {
                        let bv = self.value(*b).data();
                        let da = grads[i].as_mut().unwrap();
                        for k in 0..g.len() {
                            da[k] += g[k] * bv[k];
                        }
                    }
                    if let Some(i) = acc(*b, &mut grads) {
                        let av = self.value(*a).data();
                        let db = grads[i].as_mut().unwrap();
                        for k in 0..g.len() {
                            db[k] += g[k] * av[k];
                        }
                    }
                }
                Op::Scale { x, s } => {
                    if let Some(i) = acc(*x, &mut grads) {
                        let dx = grads[i].as_mut().unwrap();
                        dx.iter_mut().zip(&g).for_each(|(a, v)| *a += s * v);
                    }
                }
                Op::Tanh(x) | Op::Sigmoid(x) | Op::Relu(x) => {
                    if let Some(i) = acc(*x, &mut grads) {
                        let y = node.value.as_ref().unwrap().data();
                        let dx = grads[i].as_mut().unwrap();
                        match node.op {
                            Op::Tanh(_) => {
                                for k in 0..g.len() {
                                    dx[k] += g[k] * (1.0 - y[k] * y[k]);
                                }
                            }
                            Op::Sigmoid(_) => {
                                for k in 0..g.len() {
                                    dx[k] += g[k] * y[k] * (1.0 - y[k]);
                                }
                            }
                            _ => {
                                for k in 0..g.len() {
                                    if y[k] > 0.0 {
                                        dx[k] += g[k];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Ln(x) => {
                    if let Some(i) = acc(*x, &mut grads) {
                        let xv = self.value(*x).data();
                        let dx = grads[i].as_mut().unwrap();
                        for k in 0..g.len() {
                            dx[k] += g[k] / xv[k];
                        }
                    }
                }
                Op::Mask { x, mask } => {
                    if let Some(i) = acc(*x, &mut grads) {
                        let dx = grads[i].as_mut().unwrap();
                        for k in 0..g.len() {
                            dx[k] += g[k] * mask[k];
                        }
                    }
                }
                Op::RowDot { x, v } => {
                    let (n, d) = self.shape(*x);
                    if let Some(i) = acc(*x, &mut grads) {
                        let vv = self.value(*v).data();
                        let dx = grads[i].as_mut().unwrap();
                        for r in 0..n {
                            for c in 0..d {
                                dx[r * d + c] += g[r] * vv[c];
                            }
                        }
                    }
                    if let Some(i) = acc(*v, &mut grads) {
                        let xv = self.value(*x).data();
                        let dv = grads[i].as_mut().unwrap();
                        for r in 0..n {
                            for c in 0..d {
                                dv[c] += g[r] * xv[r * d + c];
                            }
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    if let Some(i) = acc(*x, &mut grads) {
                        let d = self.shape(*x).1;
                        let y = node.value.as_ref().unwrap().data();
                        let dx = grads[i].as_mut().unwrap();
                        for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..d {
                                dr[c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
                Op::ScaleRows { x, s } => {
                    let (n, d) = self.shape(*x);
                    if let Some(i) = acc(*x, &mut grads) {
                        let sv = self.value(*s).data();
                        let dx = grads[i].as_mut().unwrap();
                        for r in 0..n {
                            for c in 0..d {
                                dx[r * d + c] += g[r * d + c] * sv[r];
                            }
                        }
                    }
                    if let Some(i) = acc(*s, &mut grads) {
                        let xv = self.value(*x).data();
                        let ds = grads[i].as_mut().unwrap();
                        for r in 0..n {
                            ds[r] += (0..d).map(|c| g[r * d + c] * xv[r * d + c]).sum::<f64>();
                        }
                    }
                }
                Op::Outer { s, v } => {
                    let n = self.shape(*s).0;
                    let d = self.value(*v).len();
                    if let Some(i) = acc(*s, &mut grads) {
                        let vv = self.value(*v).data();
                        let ds = grads[i].as_mut().unwrap();
                        for r in 0..n {
                            ds[r] += (0..d).map(|c| g[r * d + c] * vv[c]).sum::<f64>();
                        }
                    }
                    if let Some(i) = acc(*v, &mut grads) {
                        let sv = self.value(*s).data();
                        let dv = grads[i].as_mut().unwrap();
                        for r in 0..n {
                            for c in 0..d {
                                dv[c] += g[r * d + c] * sv[r];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let (n, width) = dims(node.value.as_ref().unwrap());
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if let Some(i) = acc(*p, &mut grads) {
                            let dp = grads[i].as_mut().unwrap();
                            for r in 0..n {
                                add_into(&mut dp[r * w..(r + 1) * w], &g[r * width + off..r * width + off + w]);
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        if let Some(i) = acc(*p, &mut grads) {
                            add_into(grads[i].as_mut().unwrap(), &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::Repeat { x, n } => {
                    if let Some(i) = acc(*x, &mut grads) {
                        let d = self.shape(*x).1;
                        let dx = grads[i].as_mut().unwrap();
                        for r in 0..*n {
                            add_into(dx, &g[r * d..(r + 1) * d]);
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    if let Some(i) = acc(*x, &mut grads) {
                        let (n, d) = self.shape(*x);
                        let len = g.len() / n.max(1);
                        let dx = grads[i].as_mut().unwrap();
                        for r in 0..n {
                            add_into(&mut dx[r * d + start..r * d + start + len], &g[r * len..(r + 1) * len]);
                        }
                    }
                }
                Op::SelectRow { x, row } => {
                    if let Some(i) = acc(*x, &mut grads) {
                        let d = self.shape(*x).1;
                        add_into(&mut grads[i].as_mut().unwrap()[row * d..(row + 1) * d], &g);
                    }
                }
                Op::MaskedMean { x, mask, count } => {
                    if *count > 0.0 {
                        if let Some(i) = acc(*x, &mut grads) {
                            let d = self.shape(*x).1;
                            let dx = grads[i].as_mut().unwrap();
                            for (r, m) in mask.iter().enumerate() {
                                if *m != 0.0 {
                                    let s = m / count;
                                    for c in 0..d {
                                        dx[r * d + c] += s * g[c];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::LstmStep {
                    gates,
                    h,
                    c,
                    w_hh,
                    cache,
                } => {
                    let (n, g4) = self.shape(*gates);
                    let hid = g4 / 4;
                    let cprev = self.value(*c).data();
                    let mut dpre = vec![0.0; n * g4];
                    let mut dc_prev = vec![0.0; n * hid];
                    for r in 0..n {
                        let k = &cache[r * 5 * hid..(r + 1) * 5 * hid];
                        let gh = &g[r * 2 * hid..r * 2 * hid + hid];
                        let gc = &g[r * 2 * hid + hid..(r + 1) * 2 * hid];
                        let dp = &mut dpre[r * g4..(r + 1) * g4];
                        for j in 0..hid {
                            let (i, f, gg, o, tc) = (k[j], k[hid + j], k[2 * hid + j], k[3 * hid + j], k[4 * hid + j]);
                            let dc = gc[j] + gh[j] * o * (1.0 - tc * tc);
                            let d_o = gh[j] * tc;
                            dp[j] = dc * gg * i * (1.0 - i);
                            dp[hid + j] = dc * cprev[r * hid + j] * f * (1.0 - f);
                            dp[2 * hid + j] = dc * i * (1.0 - gg * gg);
                            dp[3 * hid + j] = d_o * o * (1.0 - o);
                            dc_prev[r * hid + j] = dc * f;
                        }
                    }
                    if let Some(i) = acc(*gates, &mut grads) {
                        add_into(grads[i].as_mut().unwrap(), &dpre);
                    }
                    if let Some(i) = acc(*c, &mut grads) {
                        add_into(grads[i].as_mut().unwrap(), &dc_prev);
                    }
                    if let Some(i) = acc(*h, &mut grads) {
                        let dh = grads[i].as_mut().unwrap();
                        gemm(n, g4, hid, &dpre, false, self.value(*w_hh).data(), false, 1.0, dh);
                    }
                    if let Some(i) = acc(*w_hh, &mut grads) {
                        let dw = grads[i].as_mut().unwrap();
                        gemm(g4, n, hid, &dpre, true, self.value(*h).data(), false, 1.0, dw);
                    }
                }
                Op::Bce { p, labels, eps } => {
                    if let Some(i) = acc(*p, &mut grads) {
                        let pv = self.value(*p).data();
                        let dp = grads[i].as_mut().unwrap();
                        for k in 0..pv.len() {
                            let q = pv[k];
                            if q > *eps && q < 1.0 - eps {
                                let y = labels[k];
                                dp[k] += g[0] * (-y / q + (1.0 - y) / (1.0 - q));
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(i) = acc(*x, &mut grads) {
                        grads[i].as_mut().unwrap().iter_mut().for_each(|a| *a += g[0]);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_slice(r: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = r.iter().map(|v| (v - max).exp()).sum();
    r.iter().map(move |v| (v - max).exp() / z)
}

/// Softmax of a score vector, computed with max subtraction.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    Ok(softmax_slice(scores).collect())
}

/// Mean of the rows (width `d`) selected by `mask`; all-zero mask gives zeros.
pub fn masked_mean(rows: &[f64], d: usize, mask: &[f64]) -> Result<Vec<f64>> {
    if mask.iter().any(|m| *m != 0.0 && *m != 1.0) {
        return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
    }
    let mut out = vec![0.0; d];
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Ok(out);
    }
    for (r, m) in mask.iter().enumerate() {
        if *m != 0.0 {
            add_into(&mut out, &rows[r * d..(r + 1) * d]);
        }
    }
    out.iter_mut().for_each(|v| *v /= count);
    Ok(out)
}

/// `-sum_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)]` with `p` clamped to `[eps, 1-eps]`.
pub fn bce(labels: &[f64], probs: &[f64], eps: f64) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("cross-entropy over zero candidates".into()));
    }
    if labels.len() != probs.len() {
        return Err(Error::Shape {
            op: "bce",
            left: vec![probs.len()],
            right: vec![labels.len()],
        });
    }
    Ok(-labels
        .iter()
        .zip(probs)
        .map(|(y, p)| {
            let p = p.clamp(eps, 1.0 - eps);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum::<f64>())
}
