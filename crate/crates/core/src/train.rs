//! Training loop: imbalance-weighted cross-entropy, Adam updates, seeded
//! shuffling, validation-based early stopping, and bit-exact checkpoints.
//!
//! Everything downstream of the seed is deterministic: batch order, the
//! validation split, parameter init (owned by the model), and single-
//! threaded updates. Two runs with equal (seed, config, data) produce
//! identical histories and identical parameter bits.

use std::collections::{btree_map, BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::eval::{confusion_at_threshold, roc_auc};
use crate::features::TrainStats;
use crate::graph::{node_input_features, NodeFeatureMode, ProductionGraph};
use crate::ingest::Topology;
use crate::model::{Model, ModelConfig, ModelKind, ParamSet};
use crate::rng::{derive_seed, SplitMix64};
use crate::windows::WindowSample;

/// Positive-class weight selection for the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// negatives / positives over the training labels.
    Auto,
    Fixed(f64),
}

/// How the internal validation subset is carved from the training samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValSelection {
    /// Latest dates by target time; keeps validation in the future of the
    /// data it monitors, matching the time-split regime.
    TimeTail,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: BetaMode,
    /// Epochs without a validation-F1 improvement before stopping.
    pub early_stop_patience: usize,
    /// Fraction of training samples held out for early stopping; 0 turns
    /// validation and early stopping off.
    pub val_frac: f64,
    pub val_selection: ValSelection,
    pub seed: u64,
    /// Predicted probabilities are clamped to [eps, 1-eps] inside the loss.
    pub clamp_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
            beta: BetaMode::Auto,
            early_stop_patience: 10,
            val_frac: 0.15,
            val_selection: ValSelection::TimeTail,
            seed: 0,
            clamp_eps: 1e-7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr 0 is allowed: it is the documented no-op fixed point
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be at least 1".into()));
        }
        if !(0.0..0.9).contains(&self.val_frac) {
            return Err(Error::Config(format!("val_frac {} outside [0, 0.9)", self.val_frac)));
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config(format!("clamp_eps {} outside (0, 0.5)", self.clamp_eps)));
        }
        if let BetaMode::Fixed(v) = self.beta {
            if !(v > 0.0) {
                return Err(Error::Config(format!("fixed beta {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// L = -[beta * y * log(p) + (1 - y) * log(1 - p)] with p clamped away
/// from {0, 1} so the loss stays finite on the whole unit interval.
pub fn weighted_bce(
    tape: &mut Tape,
    y_hat: VarId,
    y: bool,
    beta: f64,
    clamp_eps: f64,
) -> Result<VarId> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta {beta} must be positive")));
    }
    let p = tape.clamp(y_hat, clamp_eps, 1.0 - clamp_eps)?;
    if y {
        let log_p = tape.log(p)?;
        tape.scale_add(log_p, -beta, 0.0)
    } else {
        let one_minus = tape.scale_add(p, -1.0, 1.0)?;
        let log_q = tape.log(one_minus)?;
        tape.scale_add(log_q, -1.0, 0.0)
    }
}

/// Inverse-frequency positive weight: negatives / positives.
pub fn compute_beta(labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Config(format!(
            "cannot derive beta from {pos} positive / {neg} negative labels; \
             set a fixed beta instead"
        )));
    }
    Ok(neg as f64 / pos as f64)
}

/// Adam with bias correction; slots are aligned with parameter order.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    fn new(lr: f64, params: &ParamSet) -> Adam {
        let zeros: Vec<Tensor> =
            params.entries().iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.entries_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((pj, &gj), (mj, vj)) in
                p.data_mut().iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *pj -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Node-feature lookup for graph models. Per-date tables are built from
/// the samples' own windows; the static table is one whole-period snapshot.
#[derive(Debug, Clone)]
pub enum ContextTable {
    PerDate(BTreeMap<NaiveDate, Tensor>),
    Static(Tensor),
}

impl ContextTable {
    /// One node-feature matrix per distinct target date, each built from
    /// the latest window at or before that date per well. A well whose
    /// first window comes later contributes a zero vector until then (its
    /// history is still unknown at that date), so no future data leaks
    /// backward. Wells entirely absent from `samples` are an error.
    pub fn per_date(
        samples: &[WindowSample],
        graph: &ProductionGraph,
        topology: &Topology,
    ) -> Result<ContextTable> {
        if samples.is_empty() {
            return Err(Error::Validation("no samples to build graph context from".into()));
        }
        let dim = samples[0].x.cols();
        let mut per_well: BTreeMap<&str, Vec<(NaiveDate, &Tensor)>> = BTreeMap::new();
        for s in samples {
            per_well.entry(&s.well_id).or_default().push((s.date, &s.x));
        }
        for windows in per_well.values_mut() {
            windows.sort_by_key(|(d, _)| *d);
        }
        for (_, node) in graph.wells() {
            if !per_well.contains_key(node.id.as_str()) {
                return Err(Error::Validation(format!(
                    "no window in scope for well {:?}",
                    node.id
                )));
            }
        }
        let dates: BTreeSet<NaiveDate> = samples.iter().map(|s| s.date).collect();
        let mut table = BTreeMap::new();
        for &date in &dates {
            let mut matrices: BTreeMap<String, Tensor> = BTreeMap::new();
            for (well, windows) in &per_well {
                let latest = windows
                    .iter()
                    .take_while(|(d, _)| *d <= date)
                    .last()
                    .map(|(_, x)| (*x).clone())
                    .unwrap_or_else(|| Tensor::zeros(1, dim));
                matrices.insert(well.to_string(), latest);
            }
            let nf = node_input_features(graph, topology, &matrices, NodeFeatureMode::WindowMean)?;
            table.insert(date, nf.values);
        }
        Ok(ContextTable::PerDate(table))
    }

    /// Single snapshot from per-well matrices (typically each well's full
    /// training-period rows).
    pub fn static_mode(
        per_well: &BTreeMap<String, Tensor>,
        graph: &ProductionGraph,
        topology: &Topology,
    ) -> Result<ContextTable> {
        let nf = node_input_features(graph, topology, per_well, NodeFeatureMode::Static)?;
        Ok(ContextTable::Static(nf.values))
    }

    /// Node features in effect at `date`: the exact entry, else the latest
    /// earlier one.
    pub fn features_for(&self, date: NaiveDate) -> Result<&Tensor> {
        match self {
            ContextTable::Static(t) => Ok(t),
            ContextTable::PerDate(m) => m
                .range(..=date)
                .next_back()
                .map(|(_, t)| t)
                .ok_or_else(|| {
                    Error::Validation(format!("no graph context at or before {date}"))
                }),
        }
    }

    pub fn mode(&self) -> NodeFeatureMode {
        match self {
            ContextTable::Static(_) => NodeFeatureMode::Static,
            ContextTable::PerDate(_) => NodeFeatureMode::WindowMean,
        }
    }
}

/// Scores for `samples` in order. Graph models share one attention forward
/// per distinct target date; baselines run in chunks to amortize binding.
pub fn predict_samples(
    model: &Model,
    samples: &[WindowSample],
    graph_ctx: Option<(&ProductionGraph, &ContextTable)>,
) -> Result<Vec<f64>> {
    let mut scores = vec![0.0; samples.len()];
    if model.kind.uses_graph() {
        let (graph, table) = graph_ctx.ok_or_else(|| {
            Error::Config("graph model needs a production graph and context table".into())
        })?;
        let mut by_date: BTreeMap<NaiveDate, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_date.entry(s.date).or_default().push(i);
        }
        for (date, idxs) in by_date {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let feats = table.features_for(date)?;
            let z = bound.node_embeddings(&mut tape, graph, feats)?;
            for i in idxs {
                let s = &samples[i];
                let row = graph.index_of(&s.well_id).ok_or_else(|| {
                    Error::Validation(format!("well {:?} is not in the graph", s.well_id))
                })?;
                let y = bound.predict(&mut tape, &s.x, Some((z, row)))?;
                scores[i] = tape.value(y).item()?;
            }
        }
    } else {
        for (chunk_start, chunk) in samples.chunks(256).enumerate().map(|(c, s)| (c * 256, s)) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            for (off, s) in chunk.iter().enumerate() {
                let y = bound.predict(&mut tape, &s.x, None)?;
                scores[chunk_start + off] = tape.value(y).item()?;
            }
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when validation holds a single class.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Option<ValStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters the model ends up holding.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub beta: f64,
    pub n_train: usize,
    pub n_val: usize,
}

impl TrainHistory {
    /// Delimited log: epoch, train loss, validation metrics (blank without
    /// a validation split).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_precision,val_recall,val_f1,val_auc\n");
        for e in &self.epochs {
            match &e.val {
                Some(v) => {
                    let auc = v.auc.map(|a| a.to_string()).unwrap_or_default();
                    out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        e.epoch, e.train_loss, v.precision, v.recall, v.f1, auc
                    ));
                }
                None => out.push_str(&format!("{},{},,,,\n", e.epoch, e.train_loss)),
            }
        }
        out
    }
}

const BATCH_SALT: u64 = 0x6261746368;
const VAL_SALT: u64 = 0x76616c;

fn split_validation(samples: &[WindowSample], cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let n_val = (samples.len() as f64 * cfg.val_frac).floor() as usize;
    if n_val == 0 {
        return ((0..samples.len()).collect(), Vec::new());
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    match cfg.val_selection {
        ValSelection::TimeTail => {
            order.sort_by(|&a, &b| {
                let (sa, sb) = (&samples[a], &samples[b]);
                (sa.date, &sa.well_id, sa.t).cmp(&(sb.date, &sb.well_id, sb.t))
            });
        }
        ValSelection::Random => {
            let mut rng = SplitMix64::new(derive_seed(cfg.seed, VAL_SALT));
            rng.shuffle(&mut order);
        }
    }
    let val = order.split_off(samples.len() - n_val);
    (order, val)
}

/// Optimize `model` in place. Returns the per-epoch history; on success the
/// model holds the best-validation-F1 parameters (or the final ones without
/// a validation split). A non-finite loss restores the parameters from the
/// start of the offending epoch and reports which epoch diverged.
pub fn train(
    model: &mut Model,
    samples: &[WindowSample],
    graph_ctx: Option<(&ProductionGraph, &ContextTable)>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if model.kind.uses_graph() {
        let (graph, _) = graph_ctx.ok_or_else(|| {
            Error::Config("graph model needs a production graph and context table".into())
        })?;
        for s in samples {
            if graph.index_of(&s.well_id).is_none() {
                return Err(Error::Validation(format!(
                    "well {:?} is not in the graph",
                    s.well_id
                )));
            }
        }
    }
    let (train_idx, val_idx) = split_validation(samples, cfg);
    let beta = match cfg.beta {
        BetaMode::Fixed(v) => v,
        BetaMode::Auto => {
            let labels: Vec<bool> = train_idx.iter().map(|&i| samples[i].y).collect();
            compute_beta(&labels)?
        }
    };

    let mut rng = SplitMix64::new(derive_seed(cfg.seed, BATCH_SALT));
    let mut adam = Adam::new(cfg.lr, &model.params);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        beta,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
    };
    let mut best: Option<((f64, f64), usize, ParamSet)> = None;
    let mut epochs_since_best = 0;

    for epoch in 1..=cfg.epochs {
        let epoch_start = model.params.clone();
        let mut order = train_idx.clone();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            match train_batch(model, samples, batch, graph_ctx, beta, cfg.clamp_eps, &mut adam) {
                Ok(batch_loss) => loss_sum += batch_loss * batch.len() as f64,
                Err(Error::NonFinite { context }) => {
                    model.params = epoch_start;
                    return Err(Error::Diverged { epoch, detail: context });
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = loss_sum / order.len() as f64;

        let val = if val_idx.is_empty() {
            None
        } else {
            let held: Vec<WindowSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
            let scores = predict_samples(model, &held, graph_ctx)?;
            let labels: Vec<bool> = held.iter().map(|s| s.y).collect();
            let m = confusion_at_threshold(&scores, &labels, 0.5)?;
            Some(ValStats {
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                auc: roc_auc(&scores, &labels).ok(),
            })
        };
        history.epochs.push(EpochStats { epoch, train_loss, val: val.clone() });

        if let Some(v) = val {
            // Ties in F1 fall back to AUC: early in an imbalanced run every
            // probability sits below the 0.5 cut and F1 is a flat zero, so
            // without the tiebreak patience would expire while the ranking
            // is still improving.
            let key = (v.f1, v.auc.unwrap_or(0.0));
            let improved = best
                .as_ref()
                .map_or(true, |&((f1, auc), _, _)| key.0 > f1 || (key.0 == f1 && key.1 > auc));
            if improved {
                best = Some((key, epoch, model.params.clone()));
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
                if epochs_since_best >= cfg.early_stop_patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
    }

    match best {
        Some((_, epoch, params)) => {
            model.params = params;
            history.best_epoch = epoch;
        }
        None => history.best_epoch = history.epochs.last().map_or(0, |e| e.epoch),
    }
    Ok(history)
}

fn train_batch(
    model: &mut Model,
    samples: &[WindowSample],
    batch: &[usize],
    graph_ctx: Option<(&ProductionGraph, &ContextTable)>,
    beta: f64,
    clamp_eps: f64,
    adam: &mut Adam,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, loss_value, param_vars) = {
        let bound = model.bind(&mut tape)?;
        // one attention forward per distinct date in the batch
        let mut embeddings: BTreeMap<NaiveDate, VarId> = BTreeMap::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let s = &samples[i];
            let ctx = match graph_ctx {
                Some((graph, table)) if model.kind.uses_graph() => {
                    let z = match embeddings.entry(s.date) {
                        btree_map::Entry::Occupied(e) => *e.get(),
                        btree_map::Entry::Vacant(slot) => {
                            let feats = table.features_for(s.date)?;
                            *slot.insert(bound.node_embeddings(&mut tape, graph, feats)?)
                        }
                    };
                    let row = graph.index_of(&s.well_id).expect("checked before training");
                    Some((z, row))
                }
                _ => None,
            };
            let y_hat = bound.predict(&mut tape, &s.x, ctx)?;
            losses.push(weighted_bce(&mut tape, y_hat, s.y, beta, clamp_eps)?);
        }
        let stacked = if losses.len() == 1 { losses[0] } else { tape.concat(&losses, 0)? };
        let loss = tape.mean(stacked)?;
        let loss_value = tape.value(loss).item()?;
        let param_vars: Vec<VarId> = bound.param_vars().map(|(_, v)| v).collect();
        (loss, loss_value, param_vars)
    };
    let mut grads = tape.backward(loss)?;
    let grad_tensors: Vec<Tensor> = param_vars
        .iter()
        .zip(model.params.entries())
        .map(|(&v, (_, t))| grads.take(v, t.rows(), t.cols()))
        .collect();
    adam.step(&mut model.params, &grad_tensors)?;
    Ok(loss_value)
}

// ----------------------------------------------------------------------
// checkpoints
// ----------------------------------------------------------------------

/// Everything needed to score new data exactly as the training run did:
/// the model, the feature registry it was trained on, the standardization
/// fitted on its training rows, and the config fingerprint for compatibility
/// checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub fingerprint: String,
    pub registry: Vec<String>,
    pub indicator_mask: Vec<bool>,
    pub train_stats: TrainStats,
    pub beta: f64,
}

const CHECKPOINT_HEADER: &str = "wellwatch-checkpoint v1";

fn hex_f64(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_hex_f64(s: &str, field: &str) -> Result<f64> {
    if s.len() != 16 {
        return Err(Error::Checkpoint(format!("{field}: bad float word {s:?}")));
    }
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Checkpoint(format!("{field}: bad float word {s:?}")))
}

fn hex_row(vs: &[f64]) -> String {
    vs.iter().map(|&v| hex_f64(v)).collect::<Vec<_>>().join(" ")
}

fn parse_hex_row(line: &str, field: &str) -> Result<Vec<f64>> {
    line.split_whitespace().map(|w| parse_hex_f64(w, field)).collect()
}

impl Checkpoint {
    /// Float payloads are written as raw bit patterns, so a load returns
    /// the saved values bit-for-bit.
    pub fn to_text(&self) -> String {
        let model = &self.model;
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        out.push_str(&format!("kind {}\n", model.kind));
        out.push_str(&format!("input_dim {}\n", model.input_dim));
        out.push_str(&format!("window {}\n", model.window));
        let cfg = ron::to_string(&model.cfg).expect("model config serializes");
        out.push_str(&format!("model_config {cfg}\n"));
        out.push_str(&format!("fingerprint {}\n", self.fingerprint));
        out.push_str(&format!("beta {}\n", hex_f64(self.beta)));
        out.push_str(&format!("registry {}\n", self.registry.join(",")));
        let mask: String =
            self.indicator_mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
        out.push_str(&format!("indicator_mask {mask}\n"));
        out.push_str(&format!("stats_mean {}\n", hex_row(&self.train_stats.mean)));
        out.push_str(&format!("stats_std {}\n", hex_row(&self.train_stats.std)));
        for (name, tensor) in model.params.entries() {
            out.push_str(&format!("param {name} {} {}\n", tensor.rows(), tensor.cols()));
            out.push_str(&hex_row(tensor.data()));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Checkpoint> {
        let mut lines = text.lines();
        let mut next = |field: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("truncated before {field}")))
        };
        if next("header")? != CHECKPOINT_HEADER {
            return Err(Error::Checkpoint("unrecognized header".into()));
        }
        let mut tagged = |tag: &str| -> Result<String> {
            let line = next(tag)?;
            line.strip_prefix(tag)
                .and_then(|rest| rest.strip_prefix(' ').or(Some(rest).filter(|r| r.is_empty())))
                .map(str::to_string)
                .ok_or_else(|| Error::Checkpoint(format!("expected {tag:?}, got {line:?}")))
        };
        let kind = ModelKind::parse(&tagged("kind")?)?;
        let input_dim: usize = tagged("input_dim")?
            .parse()
            .map_err(|_| Error::Checkpoint("input_dim: not an integer".into()))?;
        let window: usize = tagged("window")?
            .parse()
            .map_err(|_| Error::Checkpoint("window: not an integer".into()))?;
        let cfg: ModelConfig = ron::from_str(&tagged("model_config")?)
            .map_err(|e| Error::Checkpoint(format!("model_config: {e}")))?;
        let fingerprint = tagged("fingerprint")?;
        let beta = parse_hex_f64(&tagged("beta")?, "beta")?;
        let registry: Vec<String> = {
            let joined = tagged("registry")?;
            if joined.is_empty() {
                Vec::new()
            } else {
                joined.split(',').map(str::to_string).collect()
            }
        };
        let indicator_mask: Vec<bool> = tagged("indicator_mask")?
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Checkpoint(format!("indicator_mask: bad char {other:?}"))),
            })
            .collect::<Result<_>>()?;
        let mean = parse_hex_row(&tagged("stats_mean")?, "stats_mean")?;
        let std = parse_hex_row(&tagged("stats_std")?, "stats_std")?;

        // expected parameter layout comes from a fresh model of the same
        // declared geometry; data then overwrites the placeholder values
        let mut model = Model::new(kind, cfg, input_dim, window, 0)
            .map_err(|e| Error::Checkpoint(format!("invalid geometry: {e}")))?;
        let expected: Vec<(String, usize, usize)> = model
            .params
            .entries()
            .iter()
            .map(|(n, t)| (n.clone(), t.rows(), t.cols()))
            .collect();
        for (name, rows, cols) in expected {
            let line = next("param")?;
            let want = format!("param {name} {rows} {cols}");
            if line != want {
                return Err(Error::Checkpoint(format!("expected {want:?}, got {line:?}")));
            }
            let data = parse_hex_row(next(&format!("param {name} data"))?, &name)?;
            if data.len() != rows * cols {
                return Err(Error::Checkpoint(format!(
                    "param {name}: {} values for a {rows}x{cols} tensor",
                    data.len()
                )));
            }
            *model.params.get_mut(&name).expect("template has this param") =
                Tensor::from_vec(rows, cols, data)
                    .map_err(|e| Error::Checkpoint(format!("param {name}: {e}")))?;
        }
        if next("end")? != "end" {
            return Err(Error::Checkpoint("missing end marker".into()));
        }

        if registry.len() != input_dim
            || indicator_mask.len() != input_dim
            || mean.len() != input_dim
            || std.len() != input_dim
        {
            return Err(Error::Checkpoint(format!(
                "registry/stats width disagrees with input_dim {input_dim}"
            )));
        }
        Ok(Checkpoint {
            model,
            fingerprint,
            registry,
            indicator_mask,
            train_stats: TrainStats { mean, std },
            beta,
        })
    }

    /// Reject use against a different configuration or feature registry.
    pub fn verify_against(&self, fingerprint: &str, registry: &[String]) -> Result<()> {
        if self.fingerprint != fingerprint {
            return Err(Error::Checkpoint(format!(
                "config changed since this checkpoint was written (fingerprint {} vs current \
                 {}); re-run the `train` stage",
                self.fingerprint, fingerprint
            )));
        }
        if self.registry != registry {
            return Err(Error::Checkpoint(format!(
                "feature registry changed since this checkpoint was written ({} features vs \
                 current {}); re-run the `train` stage",
                self.registry.len(),
                registry.len()
            )));
        }
        Ok(())
    }
}

/// Write-then-rename so a crash never leaves a partial checkpoint behind.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_text()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphConfig};

    fn day(i: usize) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 6, 1).unwrap() + chrono::Days::new(i as u64)
    }

    fn topo(wells: &[&str]) -> Topology {
        Topology {
            well_facility: wells.iter().map(|w| (w.to_string(), "F".to_string())).collect(),
            facility_field: [("F".to_string(), "FIELD".to_string())].into_iter().collect(),
        }
    }

    fn bce_value(p: f64, y: bool, beta: f64) -> f64 {
        let mut tape = Tape::new();
        let ph = tape.input(Tensor::scalar(p)).unwrap();
        let l = weighted_bce(&mut tape, ph, y, beta, 1e-7).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn bce_worked_examples() {
        assert!((bce_value(0.5, true, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_value(0.5, true, 2.0) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        // negative-class loss ignores beta
        assert_eq!(bce_value(0.3, false, 1.0), bce_value(0.3, false, 50.0));
    }

    #[test]
    fn bce_with_unit_beta_is_plain_cross_entropy() {
        for &(p, y) in &[(0.1f64, true), (0.7, true), (0.2, false), (0.9, false)] {
            let expect = if y { -p.ln() } else { -(1.0 - p).ln() };
            assert!((bce_value(p, y, 1.0) - expect).abs() < 1e-12, "p={p} y={y}");
        }
    }

    #[test]
    fn bce_is_finite_on_the_closed_interval() {
        for p in [0.0, 1.0, 1e-300, 1.0 - 1e-16] {
            assert!(bce_value(p, true, 3.0).is_finite(), "p={p}");
            assert!(bce_value(p, false, 3.0).is_finite(), "p={p}");
        }
        let mut tape = Tape::new();
        let ph = tape.input(Tensor::scalar(0.5)).unwrap();
        assert!(weighted_bce(&mut tape, ph, true, 0.0, 1e-7).is_err());
    }

    #[test]
    fn positive_gradient_scales_linearly_in_beta() {
        let grad_at = |beta: f64| {
            let mut tape = Tape::new();
            let p = tape.input(Tensor::scalar(0.3)).unwrap();
            let l = weighted_bce(&mut tape, p, true, beta, 1e-7).unwrap();
            let grads = tape.backward(l).unwrap();
            grads.wrt(p).unwrap().item().unwrap()
        };
        let g1 = grad_at(1.0);
        let g2 = grad_at(2.0);
        let g4 = grad_at(4.0);
        assert!((g2 / g1 - 2.0).abs() < 1e-9);
        assert!((g4 / g2 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn beta_from_label_counts() {
        let mut labels = vec![false; 97];
        labels.extend([true; 3]);
        assert!((compute_beta(&labels).unwrap() - 97.0 / 3.0).abs() < 1e-12);
        assert_eq!(compute_beta(&[true, false, true, false]).unwrap(), 1.0);
        let err = compute_beta(&[false, false]).unwrap_err();
        assert!(err.to_string().contains("fixed"), "{err}");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // reuse Model's container via a throwaway logistic model
        let mut model = Model::new(ModelKind::Logistic, ModelConfig::default(), 1, 1, 0).unwrap();
        *model.params.get_mut("logistic.w").unwrap() = Tensor::scalar(5.0);
        let mut params = model.params.clone();
        let mut adam = Adam::new(0.1, &params);
        for _ in 0..500 {
            // d/dw of w^2 is 2w; bias gradient 0
            let w = params.get("logistic.w").unwrap().item().unwrap();
            let grads = vec![Tensor::scalar(2.0 * w), Tensor::scalar(0.0)];
            adam.step(&mut params, &grads).unwrap();
        }
        assert!(params.get("logistic.w").unwrap().item().unwrap().abs() < 0.05);
    }

    /// Two wells, alternating features, anomalies wherever feature 0 jumps.
    fn toy_samples(n_per_well: usize, r: usize, f: usize) -> Vec<WindowSample> {
        let mut rng = SplitMix64::new(41);
        let mut samples = Vec::new();
        for well in ["W1", "W2"] {
            let steps = n_per_well + r;
            let mut rows: Vec<Vec<f64>> = Vec::new();
            let mut hot = vec![false; steps];
            for t in 0..steps {
                let anomalous = t >= r && rng.chance(0.25);
                hot[t] = anomalous;
                let mut row: Vec<f64> = (0..f).map(|_| rng.normal(0.0, 0.3)).collect();
                if anomalous {
                    row[0] += 3.0;
                }
                rows.push(row);
            }
            for t in r..steps {
                let mut data = Vec::new();
                for row in &rows[t - r..t] {
                    data.extend_from_slice(row);
                }
                samples.push(WindowSample {
                    well_id: well.to_string(),
                    t,
                    date: day(t),
                    // the signal sits in the last window row, one step
                    // before the target: predictable from history alone
                    x: Tensor::from_vec(r, f, data).unwrap(),
                    y: hot[t - 1],
                });
            }
        }
        samples
    }

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 0.02,
            epochs,
            batch_size: 32,
            val_frac: 0.0,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn logistic_overfits_a_separable_toy_set() {
        let samples = toy_samples(50, 3, 4);
        let mut model = Model::new(ModelKind::Logistic, ModelConfig::default(), 4, 3, 7).unwrap();
        train(&mut model, &samples, None, &quick_cfg(120, 7)).unwrap();
        let scores = predict_samples(&model, &samples, None).unwrap();
        let labels: Vec<bool> = samples.iter().map(|s| s.y).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!(auc >= 0.99, "train AUC {auc}");
    }

    #[test]
    fn graph_model_overfits_with_shared_attention() {
        let samples = toy_samples(40, 3, 4);
        let t = topo(&["W1", "W2"]);
        let graph = build_graph(&t, &GraphConfig::default()).unwrap();
        let table = ContextTable::per_date(&samples, &graph, &t).unwrap();
        let cfg = ModelConfig { gat_dim: 2, lstm_hidden: 6, ..ModelConfig::default() };
        let mut model = Model::new(ModelKind::TemporalGat, cfg, 4, 3, 5).unwrap();
        train(&mut model, &samples, Some((&graph, &table)), &quick_cfg(60, 5)).unwrap();
        let scores = predict_samples(&model, &samples, Some((&graph, &table))).unwrap();
        let labels: Vec<bool> = samples.iter().map(|s| s.y).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!(auc >= 0.99, "train AUC {auc}");
    }

    #[test]
    fn same_seed_reproduces_history_and_parameters() {
        let samples = toy_samples(30, 3, 4);
        let run = || {
            let mut model =
                Model::new(ModelKind::Logistic, ModelConfig::default(), 4, 3, 9).unwrap();
            let cfg = TrainConfig { val_frac: 0.2, ..quick_cfg(15, 9) };
            let history = train(&mut model, &samples, None, &cfg).unwrap();
            (history, model.params)
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn zero_learning_rate_is_a_fixed_point() {
        let samples = toy_samples(20, 3, 4);
        let mut model = Model::new(ModelKind::LstmOnly, ModelConfig::default(), 4, 3, 2).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig { lr: 0.0, ..quick_cfg(3, 2) };
        train(&mut model, &samples, None, &cfg).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn early_stopping_restores_the_best_epoch() {
        let samples = toy_samples(40, 3, 4);
        let mut model = Model::new(ModelKind::Logistic, ModelConfig::default(), 4, 3, 3).unwrap();
        let cfg = TrainConfig {
            val_frac: 0.25,
            early_stop_patience: 3,
            epochs: 200,
            lr: 0.05,
            seed: 3,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &samples, None, &cfg).unwrap();
        assert!(history.epochs.len() < 200, "should stop early on a plateau");
        assert!(history.stopped_early);
        let best_recorded = history
            .epochs
            .iter()
            .filter_map(|e| e.val.as_ref().map(|v| (e.epoch, v.f1)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        assert_eq!(history.best_epoch, best_recorded.0);
        // the restored parameters reproduce the recorded best F1
        let (_, val_idx) = split_validation(&samples, &cfg);
        let held: Vec<WindowSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
        let scores = predict_samples(&model, &held, None).unwrap();
        let labels: Vec<bool> = held.iter().map(|s| s.y).collect();
        let m = confusion_at_threshold(&scores, &labels, 0.5).unwrap();
        assert_eq!(m.f1, best_recorded.1);
    }

    #[test]
    fn divergence_reports_the_epoch_and_keeps_finite_parameters() {
        let samples = toy_samples(20, 2, 3);
        let mut model = Model::new(ModelKind::Logistic, ModelConfig::default(), 3, 2, 1).unwrap();
        let cfg = TrainConfig { lr: 1e308, ..quick_cfg(5, 1) };
        let err = train(&mut model, &samples, None, &cfg).unwrap_err();
        match err {
            Error::Diverged { epoch, .. } => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other}"),
        }
        for (name, tensor) in model.params.entries() {
            assert!(tensor.all_finite(), "{name} not finite after divergence recovery");
        }
    }

    #[test]
    fn context_table_falls_back_to_latest_earlier_date() {
        let samples = toy_samples(10, 3, 4);
        let t = topo(&["W1", "W2"]);
        let graph = build_graph(&t, &GraphConfig::default()).unwrap();
        let table = ContextTable::per_date(&samples, &graph, &t).unwrap();
        let first = samples.iter().map(|s| s.date).min().unwrap();
        let last = samples.iter().map(|s| s.date).max().unwrap();
        assert!(table.features_for(first).is_ok());
        // between sample dates and far in the future both resolve backward
        assert!(table.features_for(last + chrono::Days::new(400)).is_ok());
        let err = table.features_for(first - chrono::Days::new(1)).unwrap_err();
        assert!(err.to_string().contains("no graph context"), "{err}");
    }

    #[test]
    fn context_table_requires_every_graph_well() {
        let samples = toy_samples(5, 3, 4);
        let t = topo(&["W1", "W2", "W_GHOST"]);
        let graph = build_graph(&t, &GraphConfig::default()).unwrap();
        let err = ContextTable::per_date(&samples, &graph, &t).unwrap_err();
        assert!(err.to_string().contains("W_GHOST"), "{err}");
    }

    #[test]
    fn late_starting_well_contributes_zeros_before_its_first_window() {
        let mut samples = toy_samples(8, 3, 4);
        // delay W2 by dropping its early samples
        let cut = day(6);
        samples.retain(|s| s.well_id == "W1" || s.date >= cut);
        let t = topo(&["W1", "W2"]);
        let graph = build_graph(&t, &GraphConfig::default()).unwrap();
        let table = ContextTable::per_date(&samples, &graph, &t).unwrap();
        let early = samples
            .iter()
            .filter(|s| s.well_id == "W1" && s.date < cut)
            .map(|s| s.date)
            .next()
            .unwrap();
        let feats = table.features_for(early).unwrap();
        let w2 = graph.index_of("W2").unwrap();
        assert!(feats.row_slice(w2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let samples = toy_samples(20, 3, 4);
        let mut model = Model::new(ModelKind::Logistic, ModelConfig::default(), 4, 3, 4).unwrap();
        let cfg = TrainConfig { val_frac: 0.2, ..quick_cfg(5, 4) };
        let history = train(&mut model, &samples, None, &cfg).unwrap();
        let csv = history.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,val_precision,val_recall,val_f1,val_auc");
        assert_eq!(lines.len(), history.epochs.len() + 1);
        assert!(lines[1].starts_with("1,"));
    }

    fn sample_checkpoint() -> Checkpoint {
        let model = Model::new(
            ModelKind::TemporalGat,
            ModelConfig { gat_dim: 2, lstm_hidden: 3, ..ModelConfig::default() },
            4,
            3,
            99,
        )
        .unwrap();
        Checkpoint {
            model,
            fingerprint: "abc123".into(),
            registry: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            indicator_mask: vec![false, false, true, false],
            train_stats: TrainStats {
                mean: vec![0.5, -1.0, 0.0, 3.25],
                std: vec![1.0, 2.0, 1.0, 0.125],
            },
            beta: 32.0 / 3.0,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let back = Checkpoint::from_text(&ckpt.to_text()).unwrap();
        assert_eq!(back, ckpt);
        // explicit bit comparison on a float that has no short decimal form
        assert_eq!(back.beta.to_bits(), ckpt.beta.to_bits());
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn checkpoint_verification_rejects_mismatches() {
        let ckpt = sample_checkpoint();
        ckpt.verify_against("abc123", &ckpt.registry).unwrap();
        assert!(ckpt.verify_against("other", &ckpt.registry).is_err());
        let short: Vec<String> = ckpt.registry[..3].to_vec();
        let err = ckpt.verify_against("abc123", &short).unwrap_err();
        assert!(err.to_string().contains("4 features"), "{err}");
    }

    #[test]
    fn corrupt_checkpoints_fail_loudly() {
        let text = sample_checkpoint().to_text();
        // truncated: drop the trailing end marker and last param row
        let cut = text.rfind("param head.b").unwrap();
        assert!(Checkpoint::from_text(&text[..cut]).is_err());
        // corrupted hex word
        let bad = text.replacen("beta ", "beta zz", 1);
        assert!(Checkpoint::from_text(&bad).is_err());
        // wrong header
        assert!(Checkpoint::from_text("nope\n").is_err());
    }
}
