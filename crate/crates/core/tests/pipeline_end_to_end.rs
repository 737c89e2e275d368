//! Full pipeline run on a small generated dataset, checking the artifact
//! contract between stages: everything flows through files, reruns are
//! byte-identical, and a missing input names the stage that produces it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use wellwatch::config::{sha256_hex, RunConfig, SplitChoice};
use wellwatch::eval::EvalReport;
use wellwatch::model::ModelKind;
use wellwatch::pipeline::{run_stage, Stage};
use wellwatch::synth::{AnomalyKind, AnomalySpec, SynthConfig};

fn tiny_config(out_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.out_dir = out_dir.to_str().unwrap().to_string();
    cfg.synth = Some(SynthConfig {
        n_fields: 1,
        n_facilities: 2,
        wells_per_facility: 2,
        t_days: 150,
        seed: 7,
        anomalies: vec![
            AnomalySpec { kind: AnomalyKind::Theft, rate: 0.06, magnitude: 0.6, duration: 7 },
            AnomalySpec {
                kind: AnomalyKind::Inefficiency,
                rate: 0.06,
                magnitude: 0.5,
                duration: 10,
            },
            AnomalySpec {
                kind: AnomalyKind::FacilityEvent,
                rate: 0.04,
                magnitude: 0.7,
                duration: 8,
            },
        ],
        ..SynthConfig::default()
    });
    cfg.window = 6;
    cfg.split = SplitChoice::TimeFraction { frac: 0.7 };
    cfg.model_kind = ModelKind::TemporalGat;
    cfg.model.gat_dim = 4;
    cfg.model.lstm_hidden = 6;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 32;
    cfg.train.seed = 3;
    cfg.validate().unwrap();
    cfg
}

/// sha256 of every file under `root`, keyed by relative path.
fn hash_tree(root: &Path) -> BTreeMap<String, String> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_str().unwrap().to_string();
                out.insert(rel, sha256_hex(&fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn all_stages_run_and_rerun_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    for stage in Stage::ALL {
        let line = run_stage(&cfg, stage, 2).unwrap();
        assert!(
            line.starts_with(stage.name()),
            "status line {line:?} should start with the stage name"
        );
    }
    let first = hash_tree(dir.path());
    assert!(first.contains_key("manifest.json"));
    assert!(first.contains_key("features/features.csv"));
    assert!(first.contains_key("train/checkpoint.txt"));
    assert!(first.contains_key("eval/report.ron"));
    assert!(first.contains_key("report/report.md"));

    // Rerun with a different worker count: artifacts must not depend on
    // scheduling.
    for stage in Stage::ALL {
        run_stage(&cfg, stage, 1).unwrap();
    }
    let second = hash_tree(dir.path());
    assert_eq!(first, second, "rerunning every stage must reproduce every byte");
}

#[test]
fn missing_inputs_name_the_producing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());

    let err = run_stage(&cfg, Stage::Featurize, 1).unwrap_err().to_string();
    assert!(err.contains("`ingest`"), "featurize without ingest said: {err}");

    let err = run_stage(&cfg, Stage::Evaluate, 1).unwrap_err().to_string();
    assert!(err.contains("`train`"), "evaluate without train said: {err}");
}

#[test]
fn ablation_covers_every_variant_on_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for stage in [Stage::Synth, Stage::Ingest, Stage::Featurize, Stage::Label] {
        run_stage(&cfg, stage, 2).unwrap();
    }
    run_stage(&cfg, Stage::Ablate, 2).unwrap();

    let text = fs::read_to_string(dir.path().join("ablate/comparison.ron")).unwrap();
    let reports: Vec<EvalReport> = ron::from_str(&text).unwrap();
    assert_eq!(reports.len(), 8, "4 model variants x 2 split regimes");

    let mut seen = BTreeMap::new();
    for r in &reports {
        *seen.entry((r.model_name.clone(), r.split_kind.clone())).or_insert(0u32) += 1;
        assert!((0.0..=1.0).contains(&r.roc_auc), "{} auc {}", r.model_name, r.roc_auc);
    }
    assert_eq!(seen.len(), 8, "each (model, split) pair appears exactly once: {seen:?}");
    let table = fs::read_to_string(dir.path().join("ablate/comparison.txt")).unwrap();
    for name in ["logistic", "lstm", "temporal_gat_hierarchy", "temporal_gat_peer"] {
        assert!(table.contains(name), "comparison table lists {name}");
    }
}

#[test]
fn config_change_after_training_forces_a_retrain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for stage in
        [Stage::Synth, Stage::Ingest, Stage::Featurize, Stage::Label, Stage::Split, Stage::Train]
    {
        run_stage(&cfg, stage, 2).unwrap();
    }
    let mut edited = cfg.clone();
    edited.train.lr *= 2.0;
    let err = run_stage(&edited, Stage::Evaluate, 1).unwrap_err().to_string();
    assert!(err.contains("train"), "stale checkpoint error should point at retraining: {err}");
    run_stage(&cfg, Stage::Evaluate, 1).unwrap();
}
