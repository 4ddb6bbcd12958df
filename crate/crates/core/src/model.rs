//! The recommender network: context query embedding, weekday patterns with
//! intra-level attention, four short-term LSTMs, inter-level attention and
//! the prediction MLP.
//!
//! Every candidate-dependent quantity is computed for a batch of candidates
//! at once (one row per candidate); user-level pieces are computed once and
//! broadcast.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::{build_daily_masks, build_short_term, DailyMasks, SeqConfig, ShortTermSeqs};
use crate::error::{Error, Result};
use crate::ingest::{CheckIn, VocabSizes, DAYS, SLOTS};
use crate::numerics::{lstm_sequence, LstmParams, Mode, ParamId, ParamStore, RngState, Tape, Tensor, Var};

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const POI_DIM: usize = 64;
pub const CAT_DIM: usize = 32;
pub const DOW_DIM: usize = 8;
pub const SLOT_DIM: usize = 16;
pub const AREA_DIM: usize = 32;
pub const QUERY_DIM: usize = POI_DIM + CAT_DIM + DOW_DIM + SLOT_DIM + AREA_DIM;
pub const HIDDEN: usize = 64;
pub const MLP_H1: usize = 128;
pub const MLP_H2: usize = 64;
pub const INIT_RANGE: f64 = 0.05;
pub const LOSS_EPS: f64 = 1e-12;

/// Column offset of the slot embedding inside a query row.
pub const SLOT_OFFSET: usize = POI_DIM + CAT_DIM + DOW_DIM;

/// How the long-term interest is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LongSetting {
    /// Query-conditioned attention over the weekday patterns.
    #[default]
    AttQk,
    /// Attention over the weekday patterns without the query.
    AttK,
    /// Projected average of the whole history.
    SeqAvg,
}

impl LongSetting {
    pub fn as_str(self) -> &'static str {
        match self {
            LongSetting::AttQk => "att-qk",
            LongSetting::AttK => "att-k",
            LongSetting::SeqAvg => "seq-avg",
        }
    }
}

impl fmt::Display for LongSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LongSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "att-qk" => Ok(LongSetting::AttQk),
            "att-k" => Ok(LongSetting::AttK),
            "seq-avg" => Ok(LongSetting::SeqAvg),
            _ => Err(Error::InvalidArgument(format!(
                "unknown long-term setting {s:?} (expected att-qk, att-k or seq-avg)"
            ))),
        }
    }
}

/// Which interests feed the inter-level attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantSpec {
    pub long: bool,
    pub short: [bool; 4],
    pub long_setting: LongSetting,
}

impl Default for VariantSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl VariantSpec {
    pub fn full() -> Self {
        VariantSpec {
            long: true,
            short: [true; 4],
            long_setting: LongSetting::AttQk,
        }
    }

    pub fn long_only() -> Self {
        VariantSpec {
            short: [false; 4],
            ..Self::full()
        }
    }

    pub fn short_only() -> Self {
        VariantSpec {
            long: false,
            ..Self::full()
        }
    }

    pub fn with_setting(mut self, s: LongSetting) -> Self {
        self.long_setting = s;
        self
    }

    /// Parses `full`, `long`, `short`, or a `+`/`,`-separated subset of
    /// `L, S1, S2, S3, S4`.
    pub fn parse(s: &str) -> Result<Self> {
        let spec = match s.trim().to_ascii_lowercase().as_str() {
            "full" => Self::full(),
            "long" => Self::long_only(),
            "short" => Self::short_only(),
            list => {
                let mut v = VariantSpec {
                    long: false,
                    short: [false; 4],
                    long_setting: LongSetting::AttQk,
                };
                for part in list.split(['+', ',']).map(str::trim) {
                    match part {
                        "l" => v.long = true,
                        "s1" => v.short[0] = true,
                        "s2" => v.short[1] = true,
                        "s3" => v.short[2] = true,
                        "s4" => v.short[3] = true,
                        _ => {
                            return Err(Error::InvalidArgument(format!(
                                "unknown variant component {part:?} in {s:?}"
                            )))
                        }
                    }
                }
                v
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_interests() == 0 {
            return Err(Error::InvalidArgument("variant has no active interest".into()));
        }
        Ok(())
    }

    pub fn num_interests(&self) -> usize {
        self.long as usize + self.short.iter().filter(|s| **s).count()
    }

    pub fn mlp_input_dim(&self) -> usize {
        QUERY_DIM + HIDDEN * self.num_interests()
    }

    /// Interest names in concatenation order.
    pub fn interest_names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.long {
            out.push("l");
        }
        for (k, name) in ["s1", "s2", "s3", "s4"].iter().enumerate() {
            if self.short[k] {
                out.push(*name);
            }
        }
        out
    }

    /// Canonical name, e.g. `full`, `long`, `short`, `S1`, `L+S2+S4`, with
    /// `/att-k` or `/seq-avg` appended for non-default long-term settings.
    pub fn name(&self) -> String {
        let base = if *self == Self::full().with_setting(self.long_setting) {
            "full".to_string()
        } else if *self == Self::long_only().with_setting(self.long_setting) {
            "long".to_string()
        } else if *self == Self::short_only() {
            "short".to_string()
        } else {
            self.interest_names().iter().map(|n| n.to_ascii_uppercase()).collect::<Vec<_>>().join("+")
        };
        if self.long && self.long_setting != LongSetting::AttQk {
            format!("{base}/{}", self.long_setting)
        } else {
            base
        }
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for VariantSpec {
    type Err = Error;

    /// Accepts the output of [`VariantSpec::name`].
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('/') {
            Some((base, setting)) => Ok(Self::parse(base)?.with_setting(setting.parse()?)),
            None => Self::parse(s),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct ParamIds {
    poi: ParamId,
    category: ParamId,
    dow: ParamId,
    slot: ParamId,
    area: ParamId,
    daily: Option<Linear>,
    v1: Option<ParamId>,
    v2: Option<ParamId>,
    v_e: Option<ParamId>,
    v3: ParamId,
    v4: ParamId,
    v_a: ParamId,
    lstm: [Option<LstmParams>; 4],
    mlp: [Linear; 3],
}

/// Dropout rates and mode for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout_inter: f64,
    pub dropout_mlp: f64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            dropout_inter: 0.0,
            dropout_mlp: 0.0,
        }
    }

    pub fn train(dropout_inter: f64, dropout_mlp: f64) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            dropout_inter,
            dropout_mlp,
        }
    }
}

/// Everything the model sees for one prediction step: the history before
/// the target and the target's known context.
#[derive(Clone, Debug)]
pub struct StepInput<'a> {
    pub history: &'a [CheckIn],
    pub dow: u8,
    pub slot: u8,
    pub area: usize,
    pub masks: DailyMasks,
    pub seqs: ShortTermSeqs,
}

impl<'a> StepInput<'a> {
    /// Context is read from `history[target]`; only earlier check-ins are
    /// visible to the model.
    pub fn new(history: &'a [CheckIn], target: usize, cfg: &SeqConfig) -> Result<Self> {
        let t = history.get(target).ok_or(Error::IndexOutOfRange {
            what: "target position",
            index: target,
            size: history.len(),
        })?;
        Ok(StepInput {
            history: &history[..target],
            dow: t.dow,
            slot: t.slot,
            area: t.area,
            masks: build_daily_masks(history, target),
            seqs: build_short_term(history, target, t.area, t.slot, cfg),
        })
    }
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[N, 1]` candidate probabilities.
    pub probs: Var,
    /// `[N, 152]` queries.
    pub query: Var,
    /// `[N, 7]` intra-level weights (attention settings only).
    pub intra: Option<Var>,
    /// `[N, k]` raw inter-level weights, one column per active interest.
    pub inter: Var,
    /// `[N, 64k]` weighted concatenation of interests.
    pub x: Var,
    /// Active interests before weighting, each `[N, 64]` or `[1, 64]`.
    pub interests: Vec<Var>,
}

/// Plain-value view of one candidate's interests and attention weights.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterestBundle {
    pub long: Option<Vec<f64>>,
    pub short: [Option<Vec<f64>>; 4],
    pub intra_weights: Option<Vec<f64>>,
    pub inter_weights: Vec<f64>,
    pub probability: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub variant: VariantSpec,
    pub vocab: VocabSizes,
    ids: ParamIds,
}

fn uniform(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.uniform_range(-INIT_RANGE, INIT_RANGE)).collect();
    Tensor::from_parts(rows, cols, data)
}

fn zero_bias(n: usize) -> Tensor {
    Tensor::from_parts(1, n, vec![0.0; n])
}

impl Model {
    /// Fresh parameters drawn from `rng`.
    pub fn new(vocab: VocabSizes, variant: VariantSpec, rng: &mut RngState) -> Result<Self> {
        Self::build(vocab, variant, &mut |rows, cols| uniform(rng, rows, cols))
    }

    /// Same layout as [`Model::new`] with every value zero.
    pub fn zeros(vocab: VocabSizes, variant: VariantSpec) -> Result<Self> {
        let mut m = Self::build(vocab, variant, &mut |rows, cols| Tensor::from_parts(rows, cols, vec![0.0; rows * cols]))?;
        for leaf in m.store.leaves_mut() {
            leaf.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    fn build(vocab: VocabSizes, variant: VariantSpec, init: &mut dyn FnMut(usize, usize) -> Tensor) -> Result<Self> {
        variant.validate()?;
        if vocab.pois == 0 || vocab.categories == 0 || vocab.areas == 0 {
            return Err(Error::InvalidArgument(format!("empty vocabulary {vocab:?}")));
        }
        let mut s = ParamStore::new();
        let poi = s.insert("emb.poi", init(vocab.pois, POI_DIM))?;
        let category = s.insert("emb.category", init(vocab.categories, CAT_DIM))?;
        let dow = s.insert("emb.dow", init(DAYS, DOW_DIM))?;
        let slot = s.insert("emb.slot", init(SLOTS, SLOT_DIM))?;
        let area = s.insert("emb.area", init(vocab.areas, AREA_DIM))?;

        let (mut daily, mut v1, mut v2, mut v_e) = (None, None, None, None);
        if variant.long {
            daily = Some(Linear {
                w: s.insert("daily.w", init(HIDDEN, QUERY_DIM))?,
                b: s.insert("daily.b", zero_bias(HIDDEN))?,
            });
            if variant.long_setting == LongSetting::AttQk {
                v1 = Some(s.insert("intra.v1", init(HIDDEN, QUERY_DIM))?);
            }
            if variant.long_setting != LongSetting::SeqAvg {
                v2 = Some(s.insert("intra.v2", init(HIDDEN, HIDDEN))?);
                v_e = Some(s.insert("intra.v_e", init(1, HIDDEN))?);
            }
        }
        let v3 = s.insert("inter.v3", init(HIDDEN, QUERY_DIM))?;
        let v4 = s.insert("inter.v4", init(HIDDEN, HIDDEN))?;
        let v_a = s.insert("inter.v_a", init(1, HIDDEN))?;

        let mut lstm = [None; 4];
        for k in 0..4 {
            if !variant.short[k] {
                continue;
            }
            let w_ih = s.insert(format!("lstm{}.w_ih", k + 1), init(4 * HIDDEN, POI_DIM))?;
            let w_hh = s.insert(format!("lstm{}.w_hh", k + 1), init(4 * HIDDEN, HIDDEN))?;
            let mut bias = vec![0.0; 4 * HIDDEN];
            bias[HIDDEN..2 * HIDDEN].iter_mut().for_each(|v| *v = 1.0);
            let b = s.insert(format!("lstm{}.b", k + 1), Tensor::from_parts(1, 4 * HIDDEN, bias))?;
            lstm[k] = Some(LstmParams { w_ih, w_hh, b });
        }

        let dims = [(variant.mlp_input_dim(), MLP_H1), (MLP_H1, MLP_H2), (MLP_H2, 1)];
        let mut layers = Vec::new();
        for (i, (din, dout)) in dims.into_iter().enumerate() {
            layers.push(Linear {
                w: s.insert(format!("mlp{}.w", i + 1), init(dout, din))?,
                b: s.insert(format!("mlp{}.b", i + 1), zero_bias(dout))?,
            });
        }
        let ids = ParamIds {
            poi,
            category,
            dow,
            slot,
            area,
            daily,
            v1,
            v2,
            v_e,
            v3,
            v4,
            v_a,
            lstm,
            mlp: [layers[0], layers[1], layers[2]],
        };
        Ok(Model {
            store: s,
            variant,
            vocab,
            ids,
        })
    }

    pub fn check_vocab(&self, dataset: &VocabSizes) -> Result<()> {
        let pairs = [
            ("users", self.vocab.users, dataset.users),
            ("POIs", self.vocab.pois, dataset.pois),
            ("categories", self.vocab.categories, dataset.categories),
            ("areas", self.vocab.areas, dataset.areas),
        ];
        for (what, c, d) in pairs {
            // user count does not affect any parameter shape
            if what != "users" && c != d {
                return Err(Error::VocabMismatch {
                    what,
                    checkpoint: c,
                    dataset: d,
                });
            }
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<ParamId> {
        self.store.get(name)
    }

    /// `[n, 152]` rows `[p; c; w; m; g]`.
    pub fn embed_rows(
        &self,
        tape: &mut Tape,
        pois: &[usize],
        categories: &[usize],
        dows: &[u8],
        slots: &[u8],
        areas: &[usize],
    ) -> Result<Var> {
        let n = pois.len();
        if categories.len() != n || dows.len() != n || slots.len() != n || areas.len() != n {
            return Err(Error::Shape {
                op: "embed_rows",
                left: vec![n],
                right: vec![categories.len(), dows.len(), slots.len(), areas.len()],
            });
        }
        let mut dow_rows = Vec::with_capacity(n);
        for &d in dows {
            if !(1..=DAYS as u8).contains(&d) {
                return Err(Error::IndexOutOfRange {
                    what: "day of week",
                    index: d as usize,
                    size: DAYS,
                });
            }
            dow_rows.push(d as usize - 1);
        }
        let slot_rows: Vec<usize> = slots.iter().map(|&s| s as usize).collect();
        let parts = [
            tape.gather(self.ids.poi, pois)?,
            tape.gather(self.ids.category, categories)?,
            tape.gather(self.ids.dow, &dow_rows)?,
            tape.gather(self.ids.slot, &slot_rows)?,
            tape.gather(self.ids.area, areas)?,
        ];
        tape.concat_cols(&parts)
    }

    /// `[N, 152]` queries for candidates sharing one context.
    pub fn embed_queries(&self, tape: &mut Tape, pois: &[usize], categories: &[usize], dow: u8, slot: u8, area: usize) -> Result<Var> {
        let n = pois.len();
        let p = tape.gather(self.ids.poi, pois)?;
        let c = tape.gather(self.ids.category, categories)?;
        let ctx = self.embed_rows(tape, &[0], &[0], &[dow], &[slot], &[area])?;
        let ctx = tape.slice_cols(ctx, POI_DIM + CAT_DIM, DOW_DIM + SLOT_DIM + AREA_DIM)?;
        let ctx = tape.repeat(ctx, n)?;
        tape.concat_cols(&[p, c, ctx])
    }

    fn history_rows(&self, tape: &mut Tape, history: &[CheckIn]) -> Result<Option<Var>> {
        if history.is_empty() {
            return Ok(None);
        }
        let pois: Vec<usize> = history.iter().map(|c| c.poi).collect();
        let cats: Vec<usize> = history.iter().map(|c| c.category).collect();
        let dows: Vec<u8> = history.iter().map(|c| c.dow).collect();
        let slots: Vec<u8> = history.iter().map(|c| c.slot).collect();
        let areas: Vec<usize> = history.iter().map(|c| c.area).collect();
        Ok(Some(self.embed_rows(tape, &pois, &cats, &dows, &slots, &areas)?))
    }

    fn daily_layer(&self) -> Result<Linear> {
        self.ids
            .daily
            .ok_or_else(|| Error::InvalidArgument(format!("variant {} has no long-term module", self.variant)))
    }

    /// `[7, 64]` weekday patterns `tanh(W mean_j + b)`; a day without
    /// check-ins pools to zeros.
    pub fn daily_patterns(&self, tape: &mut Tape, history: Option<Var>, masks: &DailyMasks) -> Result<Var> {
        let fc = self.daily_layer()?;
        let pooled = match history {
            None => tape.zeros(DAYS, QUERY_DIM),
            Some(h) => {
                let rows = masks
                    .masks
                    .iter()
                    .map(|m| tape.masked_mean(h, m))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_rows(&rows)?
            }
        };
        let (w, b) = (tape.param(fc.w), tape.param(fc.b));
        let z = tape.linear(pooled, w, Some(b))?;
        Ok(tape.tanh(z))
    }

    /// Intra-level attention over the weekday patterns `l_rows: [7, 64]`.
    /// `query` (`[N, 152]`) is used by `att-qk`; other settings ignore it.
    /// Returns `(l: [N, 64], e: [N, 7])`.
    pub fn intra_attention(&self, tape: &mut Tape, query: Var, l_rows: Var) -> Result<(Var, Var)> {
        let n = tape.value(query).rows();
        let (v2, v_e) = match (self.ids.v2, self.ids.v_e) {
            (Some(a), Some(b)) => (tape.param(a), tape.param(b)),
            _ => return Err(Error::InvalidArgument(format!("variant {} has no intra-level attention", self.variant))),
        };
        let kl = tape.linear(l_rows, v2, None)?;
        match self.ids.v1 {
            Some(v1) => {
                let v1 = tape.param(v1);
                let qv = tape.linear(query, v1, None)?;
                let mut cols = Vec::with_capacity(DAYS);
                for j in 0..DAYS {
                    let kj = tape.select_row(kl, j)?;
                    let z = tape.add_row(qv, kj)?;
                    let z = tape.tanh(z);
                    cols.push(tape.row_dot(z, v_e)?);
                }
                let scores = tape.concat_cols(&cols)?;
                let e = tape.softmax_rows(scores);
                let l = tape.matmul(e, l_rows)?;
                Ok((l, e))
            }
            None => {
                let z = tape.tanh(kl);
                let scores = tape.linear(v_e, z, None)?;
                let e = tape.softmax_rows(scores);
                let l = tape.matmul(e, l_rows)?;
                Ok((tape.repeat(l, n)?, tape.repeat(e, n)?))
            }
        }
    }

    /// Long-term interest `[N, 64]` plus intra weights when attention is used.
    fn long_interest(&self, tape: &mut Tape, step: &StepInput, query: Var) -> Result<(Var, Option<Var>)> {
        let n = tape.value(query).rows();
        let hist = self.history_rows(tape, step.history)?;
        match self.variant.long_setting {
            LongSetting::SeqAvg => {
                let fc = self.daily_layer()?;
                let pooled = match hist {
                    None => tape.zeros(1, QUERY_DIM),
                    Some(h) => {
                        let ones = vec![1.0; step.history.len()];
                        tape.masked_mean(h, &ones)?
                    }
                };
                let (w, b) = (tape.param(fc.w), tape.param(fc.b));
                let z = tape.linear(pooled, w, Some(b))?;
                let l = tape.tanh(z);
                Ok((tape.repeat(l, n)?, None))
            }
            _ => {
                let rows = self.daily_patterns(tape, hist, &step.masks)?;
                let (l, e) = self.intra_attention(tape, query, rows)?;
                Ok((l, Some(e)))
            }
        }
    }

    /// Final LSTM hidden states `[1, 64]` for the active short-term
    /// sequences; an empty sequence gives zeros.
    pub fn short_interests(&self, tape: &mut Tape, seqs: &ShortTermSeqs) -> Result<[Option<Var>; 4]> {
        let mut out = [None; 4];
        for (k, slot) in out.iter_mut().enumerate() {
            let Some(p) = self.ids.lstm[k] else { continue };
            let seq = seqs.get(k);
            let xs = if seq.is_empty() {
                None
            } else {
                Some(tape.gather(self.ids.poi, &seq.pois)?)
            };
            *slot = Some(lstm_sequence(tape, &p, xs)?);
        }
        Ok(out)
    }

    /// Raw scores `a_i = v_a . tanh(V3 q~ + V4 i~)` with dropout on the
    /// scoring copies only, then `x = [a_1 i_1; ...; a_k i_k]`.
    /// Interests may be `[N, 64]` or `[1, 64]` (shared by all candidates).
    /// Returns `(x: [N, 64k], a: [N, k])`.
    pub fn inter_attention(
        &self,
        tape: &mut Tape,
        query: Var,
        interests: &[Var],
        opts: &ForwardOptions,
        rng: &mut RngState,
    ) -> Result<(Var, Var)> {
        let n = tape.value(query).rows();
        let (v3, v4, v_a) = (tape.param(self.ids.v3), tape.param(self.ids.v4), tape.param(self.ids.v_a));
        let q = tape.dropout(query, opts.dropout_inter, opts.mode, rng)?;
        let qv = tape.linear(q, v3, None)?;
        let mut weights = Vec::with_capacity(interests.len());
        let mut parts = Vec::with_capacity(interests.len());
        for &int in interests {
            let shared = tape.value(int).rows() == 1 && n != 1;
            let scored = tape.dropout(int, opts.dropout_inter, opts.mode, rng)?;
            let kv = tape.linear(scored, v4, None)?;
            let z = if shared { tape.add_row(qv, kv)? } else { tape.add(qv, kv)? };
            let z = tape.tanh(z);
            let a = tape.row_dot(z, v_a)?;
            parts.push(if shared { tape.outer(a, int)? } else { tape.scale_rows(int, a)? });
            weights.push(a);
        }
        Ok((tape.concat_cols(&parts)?, tape.concat_cols(&weights)?))
    }

    /// MLP over `[q; x]` with ReLU hidden layers and a sigmoid output.
    pub fn predict(&self, tape: &mut Tape, query: Var, x: Var, opts: &ForwardOptions, rng: &mut RngState) -> Result<Var> {
        let mut h = tape.concat_cols(&[query, x])?;
        for (i, layer) in self.ids.mlp.iter().enumerate() {
            let (w, b) = (tape.param(layer.w), tape.param(layer.b));
            h = tape.linear(h, w, Some(b))?;
            if i < 2 {
                h = tape.relu(h);
                h = tape.dropout(h, opts.dropout_mlp, opts.mode, rng)?;
            }
        }
        Ok(tape.sigmoid(h))
    }

    /// Probabilities for candidate POIs `pois` (with categories) at one step.
    pub fn forward(
        &self,
        tape: &mut Tape,
        step: &StepInput,
        pois: &[usize],
        categories: &[usize],
        opts: &ForwardOptions,
        rng: &mut RngState,
    ) -> Result<ForwardVars> {
        if pois.is_empty() {
            return Err(Error::InvalidArgument("no candidates to score".into()));
        }
        if categories.len() != pois.len() {
            return Err(Error::Shape {
                op: "forward candidates",
                left: vec![pois.len()],
                right: vec![categories.len()],
            });
        }
        let query = self.embed_queries(tape, pois, categories, step.dow, step.slot, step.area)?;
        let mut interests = Vec::with_capacity(5);
        let mut intra = None;
        if self.variant.long {
            let (l, e) = self.long_interest(tape, step, query)?;
            interests.push(l);
            intra = e;
        }
        interests.extend(self.short_interests(tape, &step.seqs)?.into_iter().flatten());
        let (x, inter) = self.inter_attention(tape, query, &interests, opts, rng)?;
        let probs = self.predict(tape, query, x, opts, rng)?;
        Ok(ForwardVars {
            probs,
            query,
            intra,
            inter,
            x,
            interests,
        })
    }

    /// Summed cross-entropy over the candidates of one step.
    #[allow(clippy::too_many_arguments)]
    pub fn step_loss(
        &self,
        tape: &mut Tape,
        step: &StepInput,
        pois: &[usize],
        categories: &[usize],
        labels: &[f64],
        opts: &ForwardOptions,
        rng: &mut RngState,
    ) -> Result<Var> {
        let f = self.forward(tape, step, pois, categories, opts, rng)?;
        tape.bce(f.probs, labels, LOSS_EPS)
    }

    /// Eval-mode probabilities for every POI in `candidates`, scored in
    /// chunks of `chunk` rows.
    pub fn score(&self, step: &StepInput, candidates: &[usize], poi_category: &[usize], chunk: usize) -> Result<Vec<f64>> {
        let mut rng = RngState::new(0);
        let opts = ForwardOptions::eval();
        let mut out = Vec::with_capacity(candidates.len());
        for block in candidates.chunks(chunk.max(1)) {
            let cats = block
                .iter()
                .map(|&p| {
                    poi_category.get(p).copied().ok_or(Error::IndexOutOfRange {
                        what: "POI",
                        index: p,
                        size: poi_category.len(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new(&self.store);
            let f = self.forward(&mut tape, step, block, &cats, &opts, &mut rng)?;
            out.extend_from_slice(tape.value(f.probs).data());
        }
        Ok(out)
    }

    /// Eval-mode interests and weights for a single candidate.
    pub fn bundle(&self, step: &StepInput, poi: usize, category: usize) -> Result<InterestBundle> {
        let mut tape = Tape::new(&self.store);
        let mut rng = RngState::new(0);
        let f = self.forward(&mut tape, step, &[poi], &[category], &ForwardOptions::eval(), &mut rng)?;
        let mut segs = f.interests.iter().map(|&v| tape.value(v).data().to_vec());
        let long = if self.variant.long { segs.next() } else { None };
        let mut short: [Option<Vec<f64>>; 4] = Default::default();
        for (k, s) in short.iter_mut().enumerate() {
            if self.variant.short[k] {
                *s = segs.next();
            }
        }
        Ok(InterestBundle {
            long,
            short,
            intra_weights: f.intra.map(|e| tape.value(e).data().to_vec()),
            inter_weights: tape.value(f.inter).data().to_vec(),
            probability: tape.value(f.probs).item(),
        })
    }
}

#[cfg(test)]
mod tests;
