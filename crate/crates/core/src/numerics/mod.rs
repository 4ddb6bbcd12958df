//! Dense `f64` arrays, a recording tape for reverse-mode gradients, and the
//! handful of layers the recommender is built from.

mod params;
mod rng;
mod tape;
mod tensor;

pub use params::{Gradients, LeafGrad, ParamId, ParamLeaf, ParamStore};
pub use rng::RngState;
pub use tape::{bce, masked_mean, softmax, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Train mode samples dropout masks; eval mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `W x (+ b)` on plain buffers; `w` is `m x n` row-major.
pub fn affine(w: &Tensor, x: &[f64], b: Option<&[f64]>) -> Result<Vec<f64>> {
    let (m, n) = (w.rows(), w.cols());
    if w.shape().len() != 2 || n != x.len() {
        return Err(Error::Shape {
            op: "affine",
            left: w.shape().to_vec(),
            right: vec![x.len()],
        });
    }
    if let Some(b) = b {
        if b.len() != m {
            return Err(Error::Shape {
                op: "affine bias",
                left: w.shape().to_vec(),
                right: vec![b.len()],
            });
        }
    }
    let mut y = vec![0.0; m];
    tensor::gemm(1, n, m, x, false, w.data(), true, 0.0, &mut y);
    if let Some(b) = b {
        y.iter_mut().zip(b).for_each(|(a, v)| *a += v);
    }
    Ok(y)
}

/// Inverted-dropout scale mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`. `None` means identity (eval mode or rate 0),
/// in which case no random numbers are drawn.
pub fn dropout_mask(len: usize, rate: f64, mode: Mode, rng: &mut RngState) -> Result<Option<Vec<f64>>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - rate);
    Ok(Some(
        (0..len)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect(),
    ))
}

pub fn dropout(x: &[f64], rate: f64, mode: Mode, rng: &mut RngState) -> Result<Vec<f64>> {
    Ok(match dropout_mask(x.len(), rate, mode, rng)? {
        None => x.to_vec(),
        Some(m) => x.iter().zip(&m).map(|(a, b)| a * b).collect(),
    })
}

impl Tape<'_> {
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut RngState) -> Result<Var> {
        match dropout_mask(self.value(x).len(), rate, mode, rng)? {
            None => Ok(x),
            Some(mask) => self.apply_mask(x, mask),
        }
    }
}

/// Weights of one LSTM: `w_ih: [4H, I]`, `w_hh: [4H, H]`, `b: [4H]`,
/// gate blocks ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

impl LstmParams {
    pub fn hidden(&self, store: &ParamStore) -> usize {
        store.value(self.w_hh).cols()
    }

    pub fn input(&self, store: &ParamStore) -> usize {
        store.value(self.w_ih).cols()
    }
}

/// One LSTM cell update; returns `(h, c)`.
pub fn lstm_cell(tape: &mut Tape, p: &LstmParams, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let (w_ih, w_hh, b) = (tape.param(p.w_ih), tape.param(p.w_hh), tape.param(p.b));
    let gates = tape.linear(x, w_ih, Some(b))?;
    split_hc(tape, gates, h, c, w_hh)
}

fn split_hc(tape: &mut Tape, gates: Var, h: Var, c: Var, w_hh: Var) -> Result<(Var, Var)> {
    let hc = tape.lstm_step(gates, h, c, w_hh)?;
    let hid = tape.value(h).cols();
    Ok((tape.slice_cols(hc, 0, hid)?, tape.slice_cols(hc, hid, hid)?))
}

/// Final hidden state of an LSTM run over the rows of `xs` from a zero
/// state; an empty sequence yields the zero vector.
pub fn lstm_sequence(tape: &mut Tape, p: &LstmParams, xs: Option<Var>) -> Result<Var> {
    let hid = p.hidden(tape.store());
    let mut h = tape.zeros(1, hid);
    let Some(xs) = xs else { return Ok(h) };
    let steps = tape.value(xs).rows();
    if steps == 0 {
        return Ok(h);
    }
    if tape.value(xs).cols() != p.input(tape.store()) {
        return Err(Error::Shape {
            op: "lstm_cell",
            left: tape.store().value(p.w_ih).shape().to_vec(),
            right: tape.value(xs).shape().to_vec(),
        });
    }
    let (w_ih, w_hh, b) = (tape.param(p.w_ih), tape.param(p.w_hh), tape.param(p.b));
    // Input projections for every step in one product.
    let proj = tape.linear(xs, w_ih, Some(b))?;
    let mut c = tape.zeros(1, hid);
    for t in 0..steps {
        let gates = tape.select_row(proj, t)?;
        (h, c) = split_hc(tape, gates, h, c, w_hh)?;
    }
    Ok(h)
}

/// Gradients of the scalar `root` for every leaf it depends on. Each call is
/// a fresh pass; load them into the store's accumulators with
/// [`ParamStore::load_grads`] once the tape is dropped.
pub fn grads(tape: &Tape, root: Var) -> Result<Gradients> {
    tape.backward(root)
}

/// Denominator floor for relative gradient error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_leaf: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates left out because `θ+ε` and `θ-ε` fell on different
    /// pieces of a piecewise function.
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients with central differences
/// `(f(θ+ε) - f(θ-ε)) / 2ε`.
///
/// Leaves with more than `max_per_leaf` values are checked on a random
/// subsample of that many coordinates (drawn from `rng`), half of them among
/// coordinates with a nonzero analytic gradient; smaller leaves are checked
/// exhaustively. `f` must be deterministic in the store contents.
pub fn finite_diff_check<F>(
    mut f: F,
    store: &mut ParamStore,
    analytic: &Gradients,
    eps: f64,
    max_per_leaf: usize,
    rng: &mut RngState,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    finite_diff_check_piecewise(|s| Ok((f(s)?, 0)), store, analytic, eps, max_per_leaf, rng)
}

/// [`finite_diff_check`] for piecewise-smooth functions. `f` also returns a
/// fingerprint of the active piece (see [`Tape::relu_pattern`]); coordinates
/// whose two probes disagree straddle a kink, where the difference quotient
/// does not estimate the derivative, and are counted in `skipped` instead.
pub fn finite_diff_check_piecewise<F>(
    mut f: F,
    store: &mut ParamStore,
    analytic: &Gradients,
    eps: f64,
    max_per_leaf: usize,
    rng: &mut RngState,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, u64)>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_leaf: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        skipped: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for pid in ids {
        let dense = analytic.dense(store, pid);
        let n = dense.len();
        let coords: Vec<usize> = if n <= max_per_leaf {
            (0..n).collect()
        } else {
            // half from coordinates with a nonzero gradient, the rest uniform
            let (mut hot, mut cold): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| dense[i] != 0.0);
            rng.shuffle(&mut hot);
            rng.shuffle(&mut cold);
            hot.truncate(max_per_leaf.div_ceil(2));
            let rest = max_per_leaf - hot.len();
            hot.extend(cold.into_iter().take(rest));
            hot.sort_unstable();
            hot
        };
        for k in coords {
            let orig = store.value(pid).data()[k];
            store.leaf_mut(pid).value.data_mut()[k] = orig + eps;
            let up = f(store);
            store.leaf_mut(pid).value.data_mut()[k] = orig - eps;
            let down = f(store);
            store.leaf_mut(pid).value.data_mut()[k] = orig;
            let ((up, p_up), (down, p_down)) = (up?, down?);
            if p_up != p_down {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(dense[k], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_leaf.is_empty() {
                report.max_rel_error = err;
                report.worst_leaf = store.leaf(pid).id.clone();
                report.worst_index = k;
                report.analytic = dense[k];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
