//! Training instances, negative sampling, Adam and the epoch loop.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::SeqConfig;
use crate::error::{Error, Result};
use crate::eval;
use crate::ingest::{DatasetSplit, UserHistory, VocabSizes};
use crate::model::{ForwardOptions, Model, StepInput, VariantSpec};
use crate::numerics::{finite_diff_check_piecewise, GradCheckReport, ParamStore, RngState, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub negatives: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dropout_inter: f64,
    pub dropout_mlp: f64,
    pub s1_window: usize,
    pub seq_cap: usize,
    pub seed: u64,
    /// First 1-based step used as a training target.
    pub t_min: usize,
    /// Draw fresh negatives every epoch instead of once before training.
    pub resample_negatives: bool,
    /// Hold out each user's second-to-last check-in and stop when its
    /// MRR@10 has not improved for `patience` epochs.
    pub early_stopping: bool,
    pub patience: usize,
    /// Finite-difference check on one instance before the first epoch.
    pub grad_check: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            negatives: 20,
            batch_size: 32,
            epochs: 30,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dropout_inter: 0.0,
            dropout_mlp: 0.1,
            s1_window: 20,
            seq_cap: 50,
            seed: 42,
            t_min: 2,
            resample_negatives: true,
            early_stopping: false,
            patience: 3,
            grad_check: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.negatives == 0 {
            return bad("negatives per positive must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        for (name, r) in [("dropout_inter", self.dropout_inter), ("dropout_mlp", self.dropout_mlp)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} = {r} outside [0, 1)"));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and nonnegative", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("moment coefficients must lie in [0, 1) and epsilon must be positive".into());
        }
        if self.t_min == 0 {
            return bad("t_min counts from 1".into());
        }
        if self.s1_window == 0 || self.seq_cap == 0 {
            return bad("sequence window and cap must be positive".into());
        }
        Ok(())
    }

    pub fn seq(&self) -> SeqConfig {
        SeqConfig {
            s1_window: self.s1_window,
            cap: self.seq_cap,
        }
    }

    pub fn train_options(&self) -> ForwardOptions {
        ForwardOptions::train(self.dropout_inter, self.dropout_mlp)
    }
}

/// Short stable digest of a training configuration and variant.
pub fn config_hash(cfg: &TrainConfig, variant: &VariantSpec) -> String {
    let text = format!("{}\nvariant={}", serde_json::to_string(cfg).expect("config serializes"), variant.name());
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(&digest[..8])
}

/// Predict `history[target]` of `user` from everything before it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub user: usize,
    /// 0-based position of the target check-in (step `t = target + 1`).
    pub target: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl TrainingInstance {
    pub fn step(&self) -> usize {
        self.target + 1
    }

    /// Candidate POIs (positive first) with their 0/1 labels.
    pub fn candidates(&self) -> (Vec<usize>, Vec<f64>) {
        let mut pois = Vec::with_capacity(self.negatives.len() + 1);
        pois.push(self.positive);
        pois.extend_from_slice(&self.negatives);
        let mut labels = vec![0.0; pois.len()];
        labels[0] = 1.0;
        (pois, labels)
    }
}

/// `n` distinct POIs drawn uniformly from `[0, num_pois)` without `positive`.
pub fn sample_negatives(num_pois: usize, positive: usize, rng: &mut RngState, n: usize) -> Result<Vec<usize>> {
    if num_pois <= n {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {n} distinct negatives from a catalog of {num_pois} POIs (need more than {n})"
        )));
    }
    if positive >= num_pois {
        return Err(Error::IndexOutOfRange {
            what: "positive POI",
            index: positive,
            size: num_pois,
        });
    }
    Ok(rng
        .sample_distinct(num_pois - 1, n)
        .into_iter()
        .map(|i| if i >= positive { i + 1 } else { i })
        .collect())
}

/// One instance per step `t_min <= t < train_end + 1` for every user, in
/// user then time order.
pub fn make_instances(
    histories: &[UserHistory],
    split: &DatasetSplit,
    num_pois: usize,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::new();
    for (h, s) in histories.iter().zip(&split.users) {
        for target in cfg.t_min - 1..s.train_end() {
            let positive = h.checkins[target].poi;
            out.push(TrainingInstance {
                user: s.user,
                target,
                positive,
                negatives: sample_negatives(num_pois, positive, rng, cfg.negatives)?,
            });
        }
    }
    Ok(out)
}

/// Adam moments, one buffer per parameter leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.leaves().iter().map(|l| vec![0.0; l.value.len()]).collect();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update from the gradients accumulated in `store`.
    pub fn update(&mut self, store: &mut ParamStore, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((leaf, m), v) in store.leaves_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = leaf.grad.data();
            let w = leaf.value.data_mut();
            for i in 0..w.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= cfg.lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub instances: usize,
}

fn poi_categories(poi_category: &[usize], pois: &[usize]) -> Vec<usize> {
    pois.iter().map(|&p| poi_category[p]).collect()
}

/// Summed cross-entropy of one instance and its gradients.
pub fn instance_loss(
    model: &Model,
    histories: &[UserHistory],
    poi_category: &[usize],
    inst: &TrainingInstance,
    cfg: &TrainConfig,
    opts: &ForwardOptions,
    rng: &mut RngState,
) -> Result<(f64, crate::numerics::Gradients)> {
    let step = StepInput::new(&histories[inst.user].checkins, inst.target, &cfg.seq())?;
    let (pois, labels) = inst.candidates();
    let cats = poi_categories(poi_category, &pois);
    let mut tape = Tape::new(&model.store);
    let loss = model.step_loss(&mut tape, &step, &pois, &cats, &labels, opts, rng)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss: value,
            user: inst.user,
            step: inst.step(),
        });
    }
    Ok((value, tape.backward(loss)?))
}

/// Shuffles `instances`, then takes one Adam step per mini-batch on the
/// batch-mean loss. Returns the mean per-instance loss seen during the epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    instances: &mut [TrainingInstance],
    histories: &[UserHistory],
    poi_category: &[usize],
    cfg: &TrainConfig,
    rng: &mut RngState,
    epoch: usize,
) -> Result<EpochStats> {
    rng.shuffle(instances);
    let opts = cfg.train_options();
    let mut total = 0.0;
    for batch in instances.chunks(cfg.batch_size) {
        model.store.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        for inst in batch {
            let (loss, grads) = instance_loss(model, histories, poi_category, inst, cfg, &opts, rng)?;
            total += loss;
            model.store.accumulate(&grads, scale);
        }
        opt.update(&mut model.store, cfg);
    }
    Ok(EpochStats {
        epoch,
        mean_loss: if instances.is_empty() { 0.0 } else { total / instances.len() as f64 },
        instances: instances.len(),
    })
}

/// Coordinates sampled per large leaf by the pre-training gradient check.
pub const GRAD_CHECK_COORDS: usize = 200;

/// Finite-difference check of one instance's loss against backprop, with
/// dropout disabled so the loss is a deterministic function of the weights.
/// Probes that cross a ReLU kink are skipped (see
/// [`finite_diff_check_piecewise`]).
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &mut Model,
    histories: &[UserHistory],
    poi_category: &[usize],
    inst: &TrainingInstance,
    cfg: &TrainConfig,
    eps: f64,
    max_per_leaf: usize,
    rng: &mut RngState,
) -> Result<GradCheckReport> {
    let opts = ForwardOptions::eval();
    let mut scratch = RngState::new(0);
    let (_, grads) = instance_loss(model, histories, poi_category, inst, cfg, &opts, &mut scratch)?;
    let step = StepInput::new(&histories[inst.user].checkins, inst.target, &cfg.seq())?;
    let (pois, labels) = inst.candidates();
    let cats = poi_categories(poi_category, &pois);
    // Same parameter layout; values come from the store handed to the tape.
    let layout = Model::zeros(model.vocab, model.variant)?;
    finite_diff_check_piecewise(
        |store| {
            let mut tape = Tape::new(store);
            let loss = layout.step_loss(&mut tape, &step, &pois, &cats, &labels, &opts, &mut RngState::new(0))?;
            Ok((tape.value(loss).item(), tape.relu_pattern()))
        },
        &mut model.store,
        &grads,
        eps,
        max_per_leaf,
        rng,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub grad_check: Option<f64>,
    /// Validation MRR@10 per epoch when early stopping is on.
    pub validation: Vec<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    /// `epoch<TAB>mean_loss<TAB>instances` lines.
    pub fn loss_log(&self) -> String {
        let mut s = String::from("epoch\tmean_loss\tinstances\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{}\t{}\t{}", e.epoch, e.mean_loss, e.instances);
        }
        s
    }
}

/// Full training run. Randomness comes from `cfg.seed` via separate
/// streams for initialization, instance sampling and epoch shuffling.
pub fn fit(
    histories: &[UserHistory],
    vocab: VocabSizes,
    poi_category: &[usize],
    variant: VariantSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Model, OptimizerState, TrainReport)> {
    cfg.validate()?;
    let split = DatasetSplit::leave_one_out(histories, cfg.early_stopping);
    let mut model = Model::new(vocab, variant, &mut RngState::derive(cfg.seed, 0))?;
    let mut opt = OptimizerState::new(&model.store);
    let mut sample_rng = RngState::derive(cfg.seed, 1);
    let mut epoch_rng = RngState::derive(cfg.seed, 2);
    let mut report = TrainReport {
        epochs: Vec::new(),
        grad_check: None,
        validation: Vec::new(),
        best_epoch: None,
    };
    let mut best: Option<(f64, ParamStore, OptimizerState)> = None;
    let mut instances = Vec::new();
    for epoch in 1..=cfg.epochs {
        if epoch == 1 || cfg.resample_negatives {
            instances = make_instances(histories, &split, vocab.pois, cfg, &mut sample_rng)?;
        }
        if epoch == 1 && cfg.grad_check {
            if let Some(inst) = instances.first().cloned() {
                let mut rng = RngState::derive(cfg.seed, 3);
                let r = gradient_check(&mut model, histories, poi_category, &inst, cfg, 1e-5, GRAD_CHECK_COORDS, &mut rng)?;
                if r.max_rel_error >= 1e-4 {
                    return Err(Error::InvalidArgument(format!(
                        "gradient check failed: relative error {:.3e} at {}[{}]",
                        r.max_rel_error, r.worst_leaf, r.worst_index
                    )));
                }
                report.grad_check = Some(r.max_rel_error);
            }
        }
        let stats = train_epoch(&mut model, &mut opt, &mut instances, histories, poi_category, cfg, &mut epoch_rng, epoch)?;
        on_epoch(&stats);
        report.epochs.push(stats);
        if cfg.early_stopping {
            let ranks = eval::rank_users(&model, histories, &split, poi_category, &cfg.seq(), eval::Target::Validation)?;
            let score = eval::metrics(&ranks)?.mrr10;
            report.validation.push(score);
            let improved = best.as_ref().is_none_or(|(b, _, _)| score > *b);
            if improved {
                best = Some((score, model.store.clone(), opt.clone()));
                report.best_epoch = Some(epoch);
            } else if epoch - report.best_epoch.unwrap_or(0) >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, store, o)) = best {
        model.store = store;
        opt = o;
    }
    Ok((model, opt, report))
}

/// Key-value run manifest.
pub fn manifest(cfg: &TrainConfig, variant: &VariantSpec, dataset_hash: &str, vocab: &VocabSizes) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config_hash={}", config_hash(cfg, variant));
    let _ = writeln!(s, "variant={}", variant.name());
    let _ = writeln!(s, "dataset_hash={dataset_hash}");
    let _ = writeln!(s, "rng={}", RngState::ALGORITHM);
    let _ = writeln!(
        s,
        "vocab.users={}\nvocab.pois={}\nvocab.categories={}\nvocab.areas={}",
        vocab.users, vocab.pois, vocab.categories, vocab.areas
    );
    if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(cfg) {
        for (k, v) in map {
            let _ = writeln!(s, "{k}={v}");
        }
    }
    s
}
