//! Full-catalog leave-one-out ranking and Acc@k / MRR@k.

use serde::{Deserialize, Serialize};

use crate::context::SeqConfig;
use crate::error::{Error, Result};
use crate::ingest::{DatasetSplit, UserHistory, VocabSizes};
use crate::model::{Model, StepInput, VariantSpec};
use crate::train::{config_hash, fit, TrainConfig, TrainReport};

/// Candidates scored per forward pass during ranking.
pub const SCORE_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedResult {
    pub user: usize,
    pub truth: usize,
    /// 1-based rank of `truth` among all POIs.
    pub rank: usize,
}

/// Rank of `scores[truth]` under descending score, ties broken by
/// ascending index.
pub fn rank_of(scores: &[f64], truth: usize) -> Result<usize> {
    let s = *scores.get(truth).ok_or(Error::IndexOutOfRange {
        what: "ground-truth POI",
        index: truth,
        size: scores.len(),
    })?;
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN score in ranking".into()));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < truth))
        .count();
    Ok(ahead + 1)
}

/// Scores every POI as the candidate for `step` and ranks `truth`.
pub fn rank_all(model: &Model, step: &StepInput, truth: usize, poi_category: &[usize]) -> Result<usize> {
    let catalog: Vec<usize> = (0..model.vocab.pois).collect();
    let scores = model.score(step, &catalog, poi_category, SCORE_CHUNK)?;
    rank_of(&scores, truth)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Test,
    Validation,
}

/// Ranks each user's held-out check-in. Users without a validation
/// position are skipped for [`Target::Validation`].
pub fn rank_users(
    model: &Model,
    histories: &[UserHistory],
    split: &DatasetSplit,
    poi_category: &[usize],
    seq: &SeqConfig,
    target: Target,
) -> Result<Vec<RankedResult>> {
    let mut out = Vec::with_capacity(split.users.len());
    for (h, s) in histories.iter().zip(&split.users) {
        let pos = match target {
            Target::Test => s.test,
            Target::Validation => match s.validation {
                Some(v) => v,
                None => continue,
            },
        };
        let step = StepInput::new(&h.checkins, pos, seq)?;
        let truth = h.checkins[pos].poi;
        out.push(RankedResult {
            user: s.user,
            truth,
            rank: rank_all(model, &step, truth, poi_category)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc1: f64,
    pub acc5: f64,
    pub acc10: f64,
    pub mrr5: f64,
    pub mrr10: f64,
    pub users: usize,
}

pub fn acc_at(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn mrr_at(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().map(|&r| if r <= k { 1.0 / r as f64 } else { 0.0 }).sum::<f64>() / ranks.len() as f64
}

pub fn metrics(results: &[RankedResult]) -> Result<Metrics> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no ranked results to summarize".into()));
    }
    let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
    Ok(Metrics {
        acc1: acc_at(&ranks, 1),
        acc5: acc_at(&ranks, 5),
        acc10: acc_at(&ranks, 10),
        mrr5: mrr_at(&ranks, 5),
        mrr10: mrr_at(&ranks, 10),
        users: ranks.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub acc1: f64,
    pub acc5: f64,
    pub acc10: f64,
    pub mrr5: f64,
    pub mrr10: f64,
    pub users: usize,
    pub config_hash: String,
}

pub const CSV_HEADER: &str = "variant,acc1,acc5,acc10,mrr5,mrr10,users,config_hash";

impl EvalReport {
    pub fn new(variant: &VariantSpec, m: &Metrics, config_hash: &str) -> Self {
        EvalReport {
            variant: variant.name(),
            acc1: m.acc1,
            acc5: m.acc5,
            acc10: m.acc10,
            mrr5: m.mrr5,
            mrr10: m.mrr10,
            users: m.users,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.variant, self.acc1, self.acc5, self.acc10, self.mrr5, self.mrr10, self.users, self.config_hash
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::InvalidArgument(format!("report row has {} fields, expected 8", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad number {s:?}: {e}")));
        Ok(EvalReport {
            variant: f[0].to_string(),
            acc1: num(f[1])?,
            acc5: num(f[2])?,
            acc10: num(f[3])?,
            mrr5: num(f[4])?,
            mrr10: num(f[5])?,
            users: f[6].parse().map_err(|e| Error::InvalidArgument(format!("bad user count: {e}")))?,
            config_hash: f[7].to_string(),
        })
    }
}

/// Test-set report for an already trained model of variant `spec`.
pub fn evaluate(
    spec: &VariantSpec,
    model: &Model,
    histories: &[UserHistory],
    poi_category: &[usize],
    seq: &SeqConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    if model.variant != *spec {
        return Err(Error::InvalidArgument(format!(
            "model was trained as variant {} but {} was requested",
            model.variant, spec
        )));
    }
    let split = DatasetSplit::leave_one_out(histories, false);
    let ranks = rank_users(model, histories, &split, poi_category, seq, Target::Test)?;
    Ok(EvalReport::new(spec, &metrics(&ranks)?, config_hash))
}

/// Trains the reduced architecture for `spec` from scratch and reports its
/// test metrics.
pub fn run_variant(
    spec: &VariantSpec,
    histories: &[UserHistory],
    vocab: VocabSizes,
    poi_category: &[usize],
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport, EvalReport)> {
    let (model, _, train) = fit(histories, vocab, poi_category, *spec, cfg, |_| {})?;
    let report = evaluate(spec, &model, histories, poi_category, &cfg.seq(), &config_hash(cfg, spec))?;
    Ok((model, train, report))
}
