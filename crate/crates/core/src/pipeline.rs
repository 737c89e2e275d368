//! Pipeline stages. Each stage reads the artifacts upstream stages wrote,
//! does one job, and writes its own artifacts plus a manifest record, so a
//! run directory is a complete, reproducible account of how every file was
//! produced. Stages communicate only through files; deleting downstream
//! artifacts never touches upstream ones.
//!
//! Standardization is fitted at the train stage and carried in the
//! checkpoint: under a time split only rows strictly before the cutoff feed
//! the statistics (the future must not calibrate the past); under a random
//! split all rows do, since train and test windows interleave through time
//! anyway.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::artifacts::{Manifest, StageWriter};
use crate::config::{RunConfig, SplitChoice};
use crate::error::{Error, Result};
use crate::eval::{build_report, EvalReport, ModelRun, ReportContext};
use crate::features::{
    apply_standardization, assemble_feature_matrix, fit_train_stats, FeatureConfig,
    FeatureMatrix,
};
use crate::graph::{build_graph, parse_topology_table, GraphConfig};
use crate::ingest::{
    build_well_series, impute_series, parse_production_table, ColumnMap, Topology, Variable,
};
use crate::labels::{label_series, LabelFrame};
use crate::model::{Model, ModelKind};
use crate::synth::{export_production_table, export_topology_table, generate};
use crate::train::{predict_samples, train, Checkpoint, ContextTable, TrainHistory};
use crate::windows::{
    make_windows, random_split, time_cutoff_at_fraction, time_split, SplitSummary, WindowSample,
};

/// Fixed decision threshold for every thresholded artifact, reflecting the
/// deployed alerting rule.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Ablation always compares on the same two splits regardless of the run's
/// own split setting: 80/20 random and 70/30 time.
const ABLATE_RANDOM_RATIO: f64 = 0.8;
const ABLATE_TIME_FRAC: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    Featurize,
    Label,
    Split,
    Train,
    Evaluate,
    Ablate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Featurize,
        Stage::Label,
        Stage::Split,
        Stage::Train,
        Stage::Evaluate,
        Stage::Ablate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Featurize => "featurize",
            Stage::Label => "label",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Run one stage against the run directory named by the config. Returns a
/// one-line human summary of what was produced.
pub fn run_stage(cfg: &RunConfig, stage: Stage, jobs: usize) -> Result<String> {
    cfg.validate()?;
    match stage {
        Stage::Synth => stage_synth(cfg),
        Stage::Ingest => stage_ingest(cfg),
        Stage::Featurize => stage_featurize(cfg, jobs),
        Stage::Label => stage_label(cfg, jobs),
        Stage::Split => stage_split(cfg),
        Stage::Train => stage_train(cfg),
        Stage::Evaluate => stage_evaluate(cfg),
        Stage::Ablate => stage_ablate(cfg),
        Stage::Report => stage_report(cfg),
    }
}

// ----------------------------------------------------------------------
// per-well parallelism
// ----------------------------------------------------------------------

/// Apply `f` to every key on up to `jobs` worker threads. Results come back
/// in input order and the first error in input order wins, so the outcome
/// is independent of thread scheduling. `jobs <= 1` runs inline.
pub(crate) fn par_map<K, V, F>(keys: Vec<K>, jobs: usize, f: F) -> Result<Vec<(K, V)>>
where
    K: Send + Sync,
    V: Send,
    F: Fn(&K) -> Result<V> + Sync,
{
    let n = keys.len();
    if jobs <= 1 || n <= 1 {
        let mut out = Vec::with_capacity(n);
        for k in keys {
            let v = f(&k)?;
            out.push((k, v));
        }
        return Ok(out);
    }
    let counter = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<V>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            scope.spawn(|| loop {
                let i = counter.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(&keys[i]);
                *slots[i].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(n);
    for (k, slot) in keys.into_iter().zip(slots) {
        let r = slot.into_inner().expect("result slot poisoned").expect("index was claimed");
        out.push((k, r?));
    }
    Ok(out)
}

// ----------------------------------------------------------------------
// artifact encodings
// ----------------------------------------------------------------------

fn parse_date(s: &str, context: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|_| Error::Artifact(format!("{context}: bad date {s:?}")))
}

fn parse_f64(s: &str, context: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Artifact(format!("{context}: bad number {s:?}")))
}

fn csv_rows(text: &str, context: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Artifact(format!("{context}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Artifact(format!("{context}: {e}")))?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn write_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    wtr.write_record(header).expect("in-memory csv write");
    for row in rows {
        wtr.write_record(row).expect("in-memory csv write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory csv flush"))
        .expect("csv output is utf-8")
}

fn registry_csv(names: &[String], indicators: &[bool]) -> String {
    let rows: Vec<Vec<String>> = names
        .iter()
        .zip(indicators)
        .map(|(n, &i)| vec![n.clone(), u8::from(i).to_string()])
        .collect();
    write_csv(&["name", "indicator"], &rows)
}

fn parse_registry_csv(text: &str) -> Result<(Vec<String>, Vec<bool>)> {
    let (header, rows) = csv_rows(text, "feature registry")?;
    if header != ["name", "indicator"] {
        return Err(Error::Artifact(format!("feature registry: bad header {header:?}")));
    }
    let mut names = Vec::with_capacity(rows.len());
    let mut flags = Vec::with_capacity(rows.len());
    for row in rows {
        names.push(row[0].clone());
        flags.push(row[1] == "1");
    }
    Ok((names, flags))
}

fn features_csv(matrices: &[FeatureMatrix]) -> String {
    let names = &matrices[0].names;
    let mut header: Vec<&str> = vec!["well_id", "date"];
    header.extend(names.iter().map(String::as_str));
    let mut rows = Vec::new();
    for m in matrices {
        for (date, value_row) in m.timestamps.iter().zip(&m.values) {
            let mut row = Vec::with_capacity(2 + value_row.len());
            row.push(m.well_id.clone());
            row.push(date.to_string());
            row.extend(value_row.iter().map(|v| v.to_string()));
            rows.push(row);
        }
    }
    write_csv(&header, &rows)
}

/// Rebuild per-well matrices from the feature table. Shortest-representation
/// decimal round-trips f64 exactly, so values come back bit-identical.
fn parse_features_csv(
    text: &str,
    names: &[String],
    indicators: &[bool],
) -> Result<Vec<FeatureMatrix>> {
    let (header, rows) = csv_rows(text, "feature table")?;
    let expected: Vec<&str> =
        ["well_id", "date"].into_iter().chain(names.iter().map(String::as_str)).collect();
    if header != expected {
        return Err(Error::Artifact(
            "feature table header does not match the registry; re-run the `featurize` stage"
                .into(),
        ));
    }
    let mut by_well: BTreeMap<String, (Vec<NaiveDate>, Vec<Vec<f64>>)> = BTreeMap::new();
    for row in rows {
        let date = parse_date(&row[1], "feature table")?;
        let mut values = Vec::with_capacity(names.len());
        for cell in &row[2..] {
            values.push(parse_f64(cell, "feature table")?);
        }
        let entry = by_well.entry(row[0].clone()).or_default();
        entry.0.push(date);
        entry.1.push(values);
    }
    let mut out = Vec::with_capacity(by_well.len());
    for (well_id, (timestamps, values)) in by_well {
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Artifact(format!(
                "feature table: well {well_id:?} rows are not in date order"
            )));
        }
        out.push(FeatureMatrix {
            well_id,
            timestamps,
            names: names.to_vec(),
            indicator_cols: indicators.to_vec(),
            values,
            train_stats: None,
        });
    }
    Ok(out)
}

fn labels_csv(frames: &[&LabelFrame]) -> String {
    let rules = &frames[0].rule_names;
    let mut header: Vec<&str> = vec!["well_id", "date", "y"];
    header.extend(rules.iter().map(String::as_str));
    let mut rows = Vec::new();
    for f in frames {
        for (t, date) in f.timestamps.iter().enumerate() {
            let mut row = vec![
                f.well_id.clone(),
                date.to_string(),
                u8::from(f.y[t]).to_string(),
            ];
            row.extend(f.rule_mask.iter().map(|col| u8::from(col[t]).to_string()));
            rows.push(row);
        }
    }
    write_csv(&header, &rows)
}

fn parse_labels_csv(text: &str) -> Result<BTreeMap<String, LabelFrame>> {
    let (header, rows) = csv_rows(text, "label table")?;
    if header.len() < 4 || header[..3] != ["well_id", "date", "y"] {
        return Err(Error::Artifact(format!("label table: bad header {header:?}")));
    }
    let rule_names: Vec<String> = header[3..].to_vec();
    let parse_bit = |cell: &str| -> Result<bool> {
        match cell {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Artifact(format!("label table: bad cell {other:?}"))),
        }
    };
    let mut frames: BTreeMap<String, LabelFrame> = BTreeMap::new();
    for row in rows {
        let frame = frames.entry(row[0].clone()).or_insert_with(|| LabelFrame {
            well_id: row[0].clone(),
            timestamps: Vec::new(),
            rule_names: rule_names.clone(),
            rule_mask: vec![Vec::new(); rule_names.len()],
            y: Vec::new(),
        });
        frame.timestamps.push(parse_date(&row[1], "label table")?);
        let y = parse_bit(&row[2])?;
        let mut any = false;
        for (k, cell) in row[3..].iter().enumerate() {
            let fired = parse_bit(cell)?;
            any |= fired;
            frame.rule_mask[k].push(fired);
        }
        if y != any {
            return Err(Error::Artifact(format!(
                "label table: row for {:?} at {} has y inconsistent with its rules",
                row[0], row[1]
            )));
        }
        frame.y.push(y);
    }
    Ok(frames)
}

const FOLD_TRAIN: &str = "train";
const FOLD_TEST: &str = "test";

fn assignment_csv(train: &[WindowSample], test: &[WindowSample]) -> String {
    let mut entries: Vec<(&WindowSample, &str)> = train
        .iter()
        .map(|s| (s, FOLD_TRAIN))
        .chain(test.iter().map(|s| (s, FOLD_TEST)))
        .collect();
    entries.sort_by(|(a, _), (b, _)| (&a.well_id, a.t).cmp(&(&b.well_id, b.t)));
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|(s, fold)| {
            vec![s.well_id.clone(), s.date.to_string(), s.t.to_string(), fold.to_string()]
        })
        .collect();
    write_csv(&["well_id", "date", "t", "fold"], &rows)
}

type FoldKeys = BTreeSet<(String, usize)>;

fn parse_assignment_csv(text: &str) -> Result<(FoldKeys, FoldKeys)> {
    let (header, rows) = csv_rows(text, "split assignment")?;
    if header != ["well_id", "date", "t", "fold"] {
        return Err(Error::Artifact(format!("split assignment: bad header {header:?}")));
    }
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for row in rows {
        let t: usize = row[2]
            .parse()
            .map_err(|_| Error::Artifact(format!("split assignment: bad index {:?}", row[2])))?;
        let key = (row[0].clone(), t);
        let inserted = match row[3].as_str() {
            FOLD_TRAIN => train.insert(key),
            FOLD_TEST => test.insert(key),
            other => {
                return Err(Error::Artifact(format!("split assignment: bad fold {other:?}")))
            }
        };
        if !inserted {
            return Err(Error::Artifact(format!(
                "split assignment: duplicate entry for well {:?} t {}",
                row[0], t
            )));
        }
    }
    if let Some(overlap) = train.intersection(&test).next() {
        return Err(Error::Artifact(format!(
            "split assignment: well {:?} t {} is in both folds",
            overlap.0, overlap.1
        )));
    }
    Ok((train, test))
}

/// Which split family produced the assignment, recorded by the split stage
/// so training can choose the matching standardization scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub kind: String,
    pub cutoff: Option<NaiveDate>,
}

// ----------------------------------------------------------------------
// shared loading
// ----------------------------------------------------------------------

struct LoadedFeatures {
    matrices: Vec<FeatureMatrix>,
    names: Vec<String>,
    indicators: Vec<bool>,
}

fn load_features(w: &mut StageWriter, out: &Path) -> Result<LoadedFeatures> {
    let reg = w.read_input(&out.join("features/registry.csv"), "featurize")?;
    let (names, indicators) = parse_registry_csv(&reg)?;
    let table = w.read_input(&out.join("features/features.csv"), "featurize")?;
    let matrices = parse_features_csv(&table, &names, &indicators)?;
    if matrices.is_empty() {
        return Err(Error::Artifact("feature table has no rows".into()));
    }
    Ok(LoadedFeatures { matrices, names, indicators })
}

fn load_labels(w: &mut StageWriter, out: &Path) -> Result<BTreeMap<String, LabelFrame>> {
    let text = w.read_input(&out.join("labels/labels.csv"), "label")?;
    parse_labels_csv(&text)
}

fn load_topology(w: &mut StageWriter, out: &Path) -> Result<Topology> {
    let text = w.read_input(&out.join("ingest/topology.csv"), "ingest")?;
    parse_topology_table(&text)
}

fn load_assignment(w: &mut StageWriter, out: &Path) -> Result<(FoldKeys, FoldKeys)> {
    let text = w.read_input(&out.join("split/assignment.csv"), "split")?;
    parse_assignment_csv(&text)
}

fn load_split_meta(w: &mut StageWriter, out: &Path) -> Result<SplitMeta> {
    let text = w.read_input(&out.join("split/meta.ron"), "split")?;
    let meta: SplitMeta =
        ron::from_str(&text).map_err(|e| Error::Artifact(format!("split meta: {e}")))?;
    if meta.kind == "time" && meta.cutoff.is_none() {
        return Err(Error::Artifact("split meta: time split without a cutoff".into()));
    }
    Ok(meta)
}

fn build_samples(
    matrices: &[FeatureMatrix],
    frames: &BTreeMap<String, LabelFrame>,
    r: usize,
) -> Result<Vec<WindowSample>> {
    let mut all = Vec::new();
    for m in matrices {
        let frame = frames.get(&m.well_id).ok_or_else(|| {
            Error::Artifact(format!(
                "labels for well {:?} are missing; re-run the `label` stage",
                m.well_id
            ))
        })?;
        all.extend(make_windows(m, frame, r)?);
    }
    Ok(all)
}

/// Rows allowed to calibrate standardization: strictly pre-cutoff under a
/// time split, everything under a random split.
fn standardization_masks(matrices: &[FeatureMatrix], meta: &SplitMeta) -> Vec<Vec<bool>> {
    match meta.cutoff {
        Some(cutoff) if meta.kind == "time" => matrices
            .iter()
            .map(|m| m.timestamps.iter().map(|d| *d < cutoff).collect())
            .collect(),
        _ => matrices.iter().map(|m| vec![true; m.n_rows()]).collect(),
    }
}

fn standardize_all(
    matrices: &[FeatureMatrix],
    meta: &SplitMeta,
) -> Result<(Vec<FeatureMatrix>, crate::features::TrainStats)> {
    let masks = standardization_masks(matrices, meta);
    let pairs: Vec<(&FeatureMatrix, &[bool])> =
        matrices.iter().zip(&masks).map(|(m, k)| (m, k.as_slice())).collect();
    let stats = fit_train_stats(&pairs)?;
    let standardized = matrices
        .iter()
        .map(|m| apply_standardization(m, &stats))
        .collect::<Result<Vec<_>>>()?;
    Ok((standardized, stats))
}

fn sample_key(s: &WindowSample) -> (String, usize) {
    (s.well_id.clone(), s.t)
}

/// Split samples by a stored assignment, insisting the assignment covers
/// exactly these samples.
fn partition_by_assignment(
    samples: Vec<WindowSample>,
    train_keys: &FoldKeys,
    test_keys: &FoldKeys,
) -> Result<(Vec<WindowSample>, Vec<WindowSample>)> {
    if samples.len() != train_keys.len() + test_keys.len() {
        return Err(Error::Artifact(format!(
            "split assignment covers {} windows but the data yields {}; re-run the `split` stage",
            train_keys.len() + test_keys.len(),
            samples.len()
        )));
    }
    let mut train = Vec::with_capacity(train_keys.len());
    let mut test = Vec::with_capacity(test_keys.len());
    for s in samples {
        let key = sample_key(&s);
        if train_keys.contains(&key) {
            train.push(s);
        } else if test_keys.contains(&key) {
            test.push(s);
        } else {
            return Err(Error::Artifact(format!(
                "window for well {:?} t {} is absent from the split assignment; \
                 re-run the `split` stage",
                key.0, key.1
            )));
        }
    }
    Ok((train, test))
}

/// Human-facing model label: the kind, with graph models qualified by their
/// edge setup.
fn variant_name(kind: ModelKind, peer_edges: bool) -> String {
    match kind {
        ModelKind::TemporalGat if peer_edges => "temporal_gat_peer".into(),
        ModelKind::TemporalGat => "temporal_gat_hierarchy".into(),
        other => other.name().into(),
    }
}

/// Train one model variant on the train fold and score the test fold.
/// The graph context is built from every window (train and test): a window
/// dated d only contains rows before d, so later-dated windows never leak
/// future values into an earlier date's context.
fn fit_and_score(
    kind: ModelKind,
    cfg: &RunConfig,
    graph_cfg: &GraphConfig,
    topology: Option<&Topology>,
    all_samples: &[WindowSample],
    train_samples: &[WindowSample],
    test_samples: &[WindowSample],
) -> Result<(Model, TrainHistory, Vec<f64>, Vec<bool>)> {
    let input_dim = all_samples
        .first()
        .map(|s| s.x.cols())
        .ok_or_else(|| Error::Validation("no windows to train on".into()))?;
    let graph_ctx = if kind.uses_graph() {
        let topology = topology.ok_or_else(|| {
            Error::Config("graph model needs a topology; check paths.topology".into())
        })?;
        let graph = build_graph(topology, graph_cfg)?;
        let ctx = ContextTable::per_date(all_samples, &graph, topology)?;
        Some((graph, ctx))
    } else {
        None
    };
    let ctx_ref = graph_ctx.as_ref().map(|(g, c)| (g, c));
    let mut model = Model::new(kind, cfg.model.clone(), input_dim, cfg.window, cfg.train.seed)?;
    let history = train(&mut model, train_samples, ctx_ref, &cfg.train)?;
    let scores = predict_samples(&model, test_samples, ctx_ref)?;
    let labels = test_samples.iter().map(|s| s.y).collect();
    Ok((model, history, scores, labels))
}

fn anomaly_rate(samples: &[WindowSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| s.y).count() as f64 / samples.len() as f64
}

fn roc_csv(report: &EvalReport) -> String {
    let rows: Vec<Vec<String>> = report
        .roc_curve
        .iter()
        .map(|p| {
            vec![
                p.threshold.to_string(),
                p.false_pos_rate.to_string(),
                p.true_pos_rate.to_string(),
            ]
        })
        .collect();
    write_csv(&["threshold", "false_pos_rate", "true_pos_rate"], &rows)
}

fn pr_csv(report: &EvalReport) -> String {
    let rows: Vec<Vec<String>> = report
        .pr_curve
        .iter()
        .map(|p| vec![p.threshold.to_string(), p.precision.to_string(), p.recall.to_string()])
        .collect();
    write_csv(&["threshold", "precision", "recall"], &rows)
}

fn to_ron_pretty<T: Serialize>(value: &T, what: &str) -> Result<String> {
    ron::ser::to_string_pretty(value, ron::ser::PrettyConfig::default())
        .map_err(|e| Error::serde(what, e))
}

// ----------------------------------------------------------------------
// stages
// ----------------------------------------------------------------------

fn stage_synth(cfg: &RunConfig) -> Result<String> {
    let scfg = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("config has no synth section; supply paths.data".into()))?;
    let out = cfg.out_dir();
    let mut manifest = Manifest::load(&out)?;
    let mut w = StageWriter::new(&out, "synth", cfg.fingerprint()?, scfg.seed);

    let (topology, series, truth) = generate(scfg)?;
    w.write("data/production.csv", &export_production_table(&series))?;
    w.write("data/topology.csv", &export_topology_table(&topology))?;
    w.write("truth/events.csv", &truth.events_csv())?;
    w.write("truth/mask.csv", &truth.mask_csv())?;
    let line = format!(
        "synth: {} wells x {} days, {} injected events, truth coverage {:.3}",
        series.len(),
        scfg.t_days,
        truth.events.len(),
        truth.coverage()
    );
    w.commit(&mut manifest)?;
    Ok(line)
}

fn stage_ingest(cfg: &RunConfig) -> Result<String> {
    let out = cfg.out_dir();
    let mut manifest = Manifest::load(&out)?;
    let mut w = StageWriter::new(&out, "ingest", cfg.fingerprint()?, cfg.train.seed);

    let data = w.read_input(&cfg.data_path(), "synth")?;
    let topo_text = w.read_input(&cfg.topology_path(), "synth")?;
    let records = parse_production_table(&data, &cfg.columns)?;
    let topology = parse_topology_table(&topo_text)?;
    let series = build_well_series(records, &topology)?;

    let mut rows = 0usize;
    let mut missing: BTreeMap<&str, usize> = BTreeMap::new();
    let mut first: Option<NaiveDate> = None;
    let mut last: Option<NaiveDate> = None;
    for s in series.values() {
        rows += s.records.len();
        for r in &s.records {
            first = Some(first.map_or(r.date, |d| d.min(r.date)));
            last = Some(last.map_or(r.date, |d| d.max(r.date)));
            for var in Variable::ALL {
                if r.get(var).is_none() {
                    *missing.entry(var.name()).or_insert(0) += 1;
                }
            }
        }
    }
    let mut summary = format!(
        "ingest summary\nwells: {}\nrows: {rows}\ndates: {} .. {}\n",
        series.len(),
        first.map(|d| d.to_string()).unwrap_or_else(|| "-".into()),
        last.map(|d| d.to_string()).unwrap_or_else(|| "-".into()),
    );
    summary.push_str("missing cells per column:\n");
    for var in Variable::ALL {
        summary
            .push_str(&format!("  {}: {}\n", var.name(), missing.get(var.name()).unwrap_or(&0)));
    }

    w.write("ingest/canonical.csv", &export_production_table(&series))?;
    w.write("ingest/topology.csv", &export_topology_table(&topology))?;
    w.write("ingest/summary.txt", &summary)?;
    let line = format!("ingest: {} wells, {rows} rows validated", series.len());
    w.commit(&mut manifest)?;
    Ok(line)
}

fn stage_featurize(cfg: &RunConfig, jobs: usize) -> Result<String> {
    let out = cfg.out_dir();
    let mut manifest = Manifest::load(&out)?;
    let mut w = StageWriter::new(&out, "featurize", cfg.fingerprint()?, cfg.train.seed);

    let canonical = w.read_input(&out.join("ingest/canonical.csv"), "ingest")?;
    let topo_text = w.read_input(&out.join("ingest/topology.csv"), "ingest")?;
    let topology = parse_topology_table(&topo_text)?;
    let records = parse_production_table(&canonical, &ColumnMap::default())?;
    let series = build_well_series(records, &topology)?;

    let wells: Vec<String> = series.keys().cloned().collect();
    let imputed = par_map(wells, jobs, |well| {
        Ok(impute_series(series[well].clone(), &cfg.impute))
    })?;

    // registry is shared across wells: indicators are the union of every
    // well's missing columns plus the configured ones
    let indicator_union: Vec<Variable> = Variable::ALL
        .into_iter()
        .filter(|v| {
            cfg.features.indicator_vars.contains(v)
                || imputed.iter().any(|(_, s)| s.indicators.contains_key(v))
        })
        .collect();
    let feature_cfg = FeatureConfig {
        indicator_vars: indicator_union,
        ..cfg.features.clone()
    };

    let matrices = par_map(imputed, jobs, |(_, s)| assemble_feature_matrix(s, &feature_cfg))?;
    let matrices: Vec<FeatureMatrix> = matrices.into_iter().map(|(_, m)| m).collect();
    let (names, indicators) = feature_cfg.registry();

    let n_rows: usize = matrices.iter().map(FeatureMatrix::n_rows).sum();
    w.write("features/registry.csv", &registry_csv(&names, &indicators))?;
    w.write("features/features.csv", &features_csv(&matrices))?;
    let line = format!(
        "featurize: {} wells, {n_rows} rows, {} features ({} indicators)",
        matrices.len(),
        names.len(),
        indicators.iter().filter(|&&b| b).count()
    );
    w.commit(&mut manifest)?;
    Ok(line)
}

fn stage_label(cfg: &RunConfig, jobs: usize) -> Result<String> {
    let out = cfg.out_dir();
    let mut manifest = Manifest::load(&out)?;
    let mut w = StageWriter::new(&out, "label", cfg.fingerprint()?, cfg.train.seed);

    let loaded = load_features(&mut w, &out)?;
    let frames = par_map(loaded.matrices, jobs, |m| label_series(m, &cfg.rules))?;
    let frames: Vec<LabelFrame> = frames.into_iter().map(|(_, f)| f).collect();

    let total: usize = frames.iter().map(|f| f.y.len()).sum();
    let positives: usize = frames.iter().map(|f| f.y.iter().filter(|&&y| y).count()).sum();
    let mut summary = format!(
        "weak label summary\nrows: {total}\nanomalies: {positives}\nanomaly rate: {}\n",
        positives as f64 / total.max(1) as f64
    );
    summary.push_str("per-rule firings:\n");
    for (k, rule) in frames[0].rule_names.iter().enumerate() {
        let fired: usize =
            frames.iter().map(|f| f.rule_mask[k].iter().filter(|&&b| b).count()).sum();
        summary.push_str(&format!("  {rule}: {fired}\n"));
    }

    let refs: Vec<&LabelFrame> = frames.iter().collect();
    w.write("labels/labels.csv", &labels_csv(&refs))?;
    w.write("labels/summary.txt", &summary)?;
    let line = format!(
        "label: {total} rows, {positives} anomalies ({:.3})",
        positives as f64 / total.max(1) as f64
    );
    w.commit(&mut manifest)?;
    Ok(line)
}

fn stage_split(cfg: &RunConfig) -> Result<String> {
    let out = cfg.out_dir();
    let mut manifest = Manifest::load(&out)?;
    let mut w = StageWriter::new(&out, "split", cfg.fingerprint()?, cfg.train.seed);

    let loaded = load_features(&mut w, &out)?;
    let frames = load_labels(&mut w, &out)?;
    let samples = build_samples(&loaded.matrices, &frames, cfg.window)?;

    let (train, test, meta) = match cfg.split {
        SplitChoice::Random { ratio, seed } => {
            let (tr, te) = random_split(samples, ratio, seed)?;
            (tr, te, SplitMeta { kind: "random".into(), cutoff: None })
        }
        SplitChoice::TimeCutoff { cutoff } => {
            let (tr, te, _) = time_split(samples, cutoff)?;
            (tr, te, SplitMeta { kind: "time".into(), cutoff: Some(cutoff) })
        }
        SplitChoice::TimeFraction { frac } => {
            let cutoff = time_cutoff_at_fraction(&samples, frac)?;
            let (tr, te, _) = time_split(samples, cutoff)?;
            (tr, te, SplitMeta { kind: "time".into(), cutoff: Some(cutoff) })
        }
    };

    let mut summary = format!("split summary ({})\n", meta.kind);
    if let Some(cutoff) = meta.cutoff {
        summary.push_str(&format!("cutoff: {cutoff}\n"));
    }
    for (fold, side) in [("train", &train), ("test", &test)] {
        let s = SplitSummary::from_samples(side).ok_or_else(|| {
            Error::Validation(format!("split left the {fold} fold empty"))
        })?;
        summary.push_str(&format!(
            "{fold}: {} windows, anomaly rate {}, dates {} .. {}\n",
            s.count, s.anomaly_rate, s.first_date, s.last_date
        ));
    }

    w.write("split/assignment.csv", &assignment_csv(&train, &test))?;
    w.write("split/meta.ron", &to_ron_pretty(&meta, "split meta")?)?;
    w.write("split/summary.txt", &summary)?;
    let line =
        format!("split: {} train / {} test windows ({})", train.len(), test.len(), meta.kind);
    w.commit(&mut manifest)?;
    Ok(line)
}

fn stage_train(cfg: &RunConfig) -> Result<String> {
    let out = cfg.out_dir();
    let mut manifest = Manifest::load(&out)?;
    let fingerprint = cfg.fingerprint()?;
    let mut w = StageWriter::new(&out, "train", fingerprint.clone(), cfg.train.seed);

    let loaded = load_features(&mut w, &out)?;
    let frames = load_labels(&mut w, &out)?;
    let (train_keys, test_keys) = load_assignment(&mut w, &out)?;
    let meta = load_split_meta(&mut w, &out)?;

    let (std_matrices, stats) = standardize_all(&loaded.matrices, &meta)?;
    let samples = build_samples(&std_matrices, &frames, cfg.window)?;
    let (train_samples, _) = partition_by_assignment(samples.clone(), &train_keys, &test_keys)?;

    let topology = if cfg.model_kind.uses_graph() {
        Some(load_topology(&mut w, &out)?)
    } else {
        None
    };
    let (model, history, _, _) = fit_and_score(
        cfg.model_kind,
        cfg,
        &cfg.graph,
        topology.as_ref(),
        &samples,
        &train_samples,
        &[],
    )?;

    let checkpoint = Checkpoint {
        model,
        fingerprint: fingerprint.clone(),
        registry: loaded.names.clone(),
        indicator_mask: loaded.indicators.clone(),
        train_stats: stats,
        beta: history.beta,
    };
    w.write("train/checkpoint.txt", &checkpoint.to_text())?;
    w.write("train/history.csv", &history.to_csv())?;

    let last_val = history.epochs.get(history.best_epoch).and_then(|e| e.val.as_ref());
    let summary = format!(
        "training summary\nmodel: {}\ntrain windows: {}\nvalidation windows: {}\n\
         beta: {}\nepochs run: {}\nbest epoch: {}\nstopped early: {}\nbest val F1: {}\n",
        variant_name(cfg.model_kind, cfg.graph.peer_edges),
        history.n_train,
        history.n_val,
        history.beta,
        history.epochs.len(),
        history.best_epoch,
        history.stopped_early,
        last_val.map(|v| v.f1.to_string()).unwrap_or_else(|| "-".into()),
    );
    w.write("train/summary.txt", &summary)?;
    let line = format!(
        "train: {} on {} windows, best epoch {} of {}",
        variant_name(cfg.model_kind, cfg.graph.peer_edges),
        history.n_train,
        history.best_epoch,
        history.epochs.len()
    );
    w.commit(&mut manifest)?;
    Ok(line)
}

fn stage_evaluate(cfg: &RunConfig) -> Result<String> {
    let out = cfg.out_dir();
    let mut manifest = Manifest::load(&out)?;
    let fingerprint = cfg.fingerprint()?;
    let mut w = StageWriter::new(&out, "evaluate", fingerprint.clone(), cfg.train.seed);

    let ckpt_text = w.read_input(&out.join("train/checkpoint.txt"), "train")?;
    let checkpoint = Checkpoint::from_text(&ckpt_text)?;
    let loaded = load_features(&mut w, &out)?;
    // a config edited since training would silently change the pipeline
    // around the frozen parameters; force a retrain instead
    checkpoint.verify_against(&fingerprint, &loaded.names)?;

    let frames = load_labels(&mut w, &out)?;
    let (train_keys, test_keys) = load_assignment(&mut w, &out)?;
    let meta = load_split_meta(&mut w, &out)?;

    let std_matrices = loaded
        .matrices
        .iter()
        .map(|m| apply_standardization(m, &checkpoint.train_stats))
        .collect::<Result<Vec<_>>>()?;
    let samples = build_samples(&std_matrices, &frames, checkpoint.model.window)?;
    let (train_samples, test_samples) =
        partition_by_assignment(samples.clone(), &train_keys, &test_keys)?;

    let graph_ctx = if checkpoint.model.kind.uses_graph() {
        let topology = load_topology(&mut w, &out)?;
        let graph = build_graph(&topology, &cfg.graph)?;
        let ctx = ContextTable::per_date(&samples, &graph, &topology)?;
        Some((graph, ctx))
    } else {
        None
    };
    let ctx_ref = graph_ctx.as_ref().map(|(g, c)| (g, c));
    let scores = predict_samples(&checkpoint.model, &test_samples, ctx_ref)?;

    let run = ModelRun {
        model_name: variant_name(checkpoint.model.kind, cfg.graph.peer_edges),
        scores,
        labels: test_samples.iter().map(|s| s.y).collect(),
    };
    let ctx = ReportContext {
        split_kind: meta.kind.clone(),
        seed: cfg.train.seed,
        config_fingerprint: fingerprint,
        threshold: DECISION_THRESHOLD,
        anomaly_rate_train: anomaly_rate(&train_samples),
    };
    let (reports, table) = build_report(std::slice::from_ref(&run), &ctx)?;
    let report = &reports[0];

    w.write("eval/report.ron", &to_ron_pretty(report, "eval report")?)?;
    w.write("eval/comparison.txt", &table)?;
    w.write("eval/roc.csv", &roc_csv(report))?;
    w.write("eval/pr.csv", &pr_csv(report))?;
    let line = format!(
        "evaluate: {} {} split AUC {:.3}, recall {:.3}, precision {:.3}",
        report.model_name,
        report.split_kind,
        report.roc_auc,
        report.recall_anomaly,
        report.precision_anomaly
    );
    w.commit(&mut manifest)?;
    Ok(line)
}

fn stage_ablate(cfg: &RunConfig) -> Result<String> {
    let out = cfg.out_dir();
    let mut manifest = Manifest::load(&out)?;
    let fingerprint = cfg.fingerprint()?;
    let mut w = StageWriter::new(&out, "ablate", fingerprint.clone(), cfg.train.seed);

    let loaded = load_features(&mut w, &out)?;
    let frames = load_labels(&mut w, &out)?;
    let topology = load_topology(&mut w, &out)?;
    let raw_samples = build_samples(&loaded.matrices, &frames, cfg.window)?;

    let variants: [(ModelKind, bool); 4] = [
        (ModelKind::Logistic, false),
        (ModelKind::LstmOnly, false),
        (ModelKind::TemporalGat, false),
        (ModelKind::TemporalGat, true),
    ];

    let mut all_reports: Vec<EvalReport> = Vec::new();
    let mut table_text = String::new();
    for split_kind in ["random", "time"] {
        let (train_raw, test_raw, meta) = match split_kind {
            "random" => {
                let (tr, te) =
                    random_split(raw_samples.clone(), ABLATE_RANDOM_RATIO, cfg.train.seed)?;
                (tr, te, SplitMeta { kind: "random".into(), cutoff: None })
            }
            _ => {
                let cutoff = time_cutoff_at_fraction(&raw_samples, ABLATE_TIME_FRAC)?;
                let (tr, te, _) = time_split(raw_samples.clone(), cutoff)?;
                (tr, te, SplitMeta { kind: "time".into(), cutoff: Some(cutoff) })
            }
        };
        let train_keys: FoldKeys = train_raw.iter().map(sample_key).collect();
        let test_keys: FoldKeys = test_raw.iter().map(sample_key).collect();

        let (std_matrices, _) = standardize_all(&loaded.matrices, &meta)?;
        let samples = build_samples(&std_matrices, &frames, cfg.window)?;
        let (train_samples, test_samples) =
            partition_by_assignment(samples.clone(), &train_keys, &test_keys)?;

        let mut runs = Vec::new();
        for (kind, peer_edges) in variants {
            let graph_cfg = GraphConfig { peer_edges, ..cfg.graph.clone() };
            let (_, _, scores, labels) = fit_and_score(
                kind,
                cfg,
                &graph_cfg,
                Some(&topology),
                &samples,
                &train_samples,
                &test_samples,
            )?;
            runs.push(ModelRun { model_name: variant_name(kind, peer_edges), scores, labels });
        }
        let ctx = ReportContext {
            split_kind: split_kind.into(),
            seed: cfg.train.seed,
            config_fingerprint: fingerprint.clone(),
            threshold: DECISION_THRESHOLD,
            anomaly_rate_train: anomaly_rate(&train_samples),
        };
        let (reports, table) = build_report(&runs, &ctx)?;
        table_text.push_str(&format!("{split_kind} split\n{table}\n"));
        all_reports.extend(reports);
    }

    w.write("ablate/comparison.ron", &to_ron_pretty(&all_reports, "ablation reports")?)?;
    w.write("ablate/comparison.txt", &table_text)?;
    let line = format!(
        "ablate: {} evaluations ({} models x 2 splits)",
        all_reports.len(),
        variants.len()
    );
    w.commit(&mut manifest)?;
    Ok(line)
}

fn stage_report(cfg: &RunConfig) -> Result<String> {
    let out = cfg.out_dir();
    let mut manifest = Manifest::load(&out)?;
    let fingerprint = cfg.fingerprint()?;
    let mut w = StageWriter::new(&out, "report", fingerprint.clone(), cfg.train.seed);

    let ingest_summary = w.read_input(&out.join("ingest/summary.txt"), "ingest")?;
    let label_summary = w.read_input(&out.join("labels/summary.txt"), "label")?;

    let mut md = format!(
        "# Production anomaly run report\n\nconfig fingerprint: `{fingerprint}`\n\n## Data\n\n```\n{ingest_summary}```\n\n## Weak labels\n\n```\n{label_summary}```\n"
    );
    let optional = [
        ("## Split", out.join("split/summary.txt"), "text"),
        ("## Training", out.join("train/summary.txt"), "text"),
        ("## Evaluation", out.join("eval/comparison.txt"), "text"),
        ("## Ablation", out.join("ablate/comparison.txt"), "text"),
    ];
    for (title, path, _) in optional {
        md.push_str(&format!("\n{title}\n\n"));
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                w.note_input(&path.display().to_string(), &text);
                md.push_str(&format!("```\n{text}```\n"));
            }
            Err(_) => md.push_str("stage not run\n"),
        }
    }

    w.write("report/report.md", &md)?;
    let line = "report: report/report.md".to_string();
    w.commit(&mut manifest)?;
    Ok(line)
}
