//! Scratch tuning probe (not shipped): sweeps optimizer settings for the
//! overfit and benchmark scenarios to pick defaults.

use std::collections::BTreeMap;
use std::time::Instant;

use wellwatch::eval::{confusion_at_threshold, roc_auc};
use wellwatch::features::{
    apply_standardization, assemble_feature_matrix, fit_train_stats, FeatureConfig, FeatureMatrix,
};
use wellwatch::graph::{build_graph, GraphConfig, ProductionGraph};
use wellwatch::ingest::{impute_series, ImputePolicy, Topology, Variable};
use wellwatch::labels::{label_series, LabelFrame, RuleConfig};
use wellwatch::model::{Model, ModelConfig, ModelKind};
use wellwatch::synth::{generate, AnomalyKind, SynthConfig};
use wellwatch::train::{predict_samples, train, ContextTable, TrainConfig};
use wellwatch::windows::{make_windows, time_cutoff_at_fraction, time_split, WindowSample};

fn dataset(
    synth: &SynthConfig,
    feat: &FeatureConfig,
    rules: &RuleConfig,
) -> (Topology, Vec<FeatureMatrix>, Vec<LabelFrame>) {
    let (topology, series, _) = generate(synth).unwrap();
    let policy = ImputePolicy::default();
    let mut mats = Vec::new();
    let mut frames = Vec::new();
    for (_, s) in series {
        let s = impute_series(s, &policy);
        let m = assemble_feature_matrix(&s, feat).unwrap();
        frames.push(label_series(&m, rules).unwrap());
        mats.push(m);
    }
    (topology, mats, frames)
}

fn indicator_feat() -> FeatureConfig {
    FeatureConfig {
        indicator_vars: vec![
            Variable::DownholePressure,
            Variable::WellheadTemp,
            Variable::ChokeSize,
        ],
        ..FeatureConfig::default()
    }
}

fn samples_std(
    mats: &[FeatureMatrix],
    frames: &[LabelFrame],
    window: usize,
    train_mask: impl Fn(&FeatureMatrix, usize) -> bool,
) -> Vec<WindowSample> {
    let masks: Vec<Vec<bool>> = mats
        .iter()
        .map(|m| (0..m.values.len()).map(|t| train_mask(m, t)).collect())
        .collect();
    let pairs: Vec<(&FeatureMatrix, &[bool])> =
        mats.iter().zip(&masks).map(|(m, k)| (m, k.as_slice())).collect();
    let stats = fit_train_stats(&pairs).unwrap();
    let by_well: BTreeMap<&str, &LabelFrame> =
        frames.iter().map(|f| (f.well_id.as_str(), f)).collect();
    let mut samples = Vec::new();
    for m in mats {
        let sm = apply_standardization(m, &stats).unwrap();
        samples.extend(make_windows(&sm, by_well[m.well_id.as_str()], window).unwrap());
    }
    samples
}

fn fit_score(
    kind: ModelKind,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    window: usize,
    topology: &Topology,
    all: &[WindowSample],
    tr: &[WindowSample],
    te: &[WindowSample],
) -> (f64, f64, f64) {
    let input_dim = all[0].x.cols();
    let mut model = Model::new(kind, mcfg.clone(), input_dim, window, tcfg.seed).unwrap();
    let graph: Option<ProductionGraph> = if kind.uses_graph() {
        Some(build_graph(topology, &GraphConfig::default()).unwrap())
    } else {
        None
    };
    let ctx = graph
        .as_ref()
        .map(|g| ContextTable::per_date(all, g, topology).unwrap());
    let gc = graph.as_ref().zip(ctx.as_ref()).map(|(g, c)| (g, c));
    let t0 = Instant::now();
    let history = train(&mut model, tr, gc, tcfg).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    if std::env::var("PROBE_HISTORY").is_ok() {
        for e in &history.epochs {
            match &e.val {
                Some(v) => println!(
                    "    ep {:>3} loss {:.4} val p {:.3} r {:.3} f1 {:.3} auc {:?}",
                    e.epoch, e.train_loss, v.precision, v.recall, v.f1, v.auc
                ),
                None => println!("    ep {:>3} loss {:.4}", e.epoch, e.train_loss),
            }
        }
        println!(
            "    best_epoch {} stopped_early {} beta {:.1} n_train {} n_val {}",
            history.best_epoch, history.stopped_early, history.beta, history.n_train, history.n_val
        );
    }
    let scores = predict_samples(&model, te, gc).unwrap();
    let labels: Vec<bool> = te.iter().map(|s| s.y).collect();
    let auc = roc_auc(&scores, &labels).unwrap();
    let rec = confusion_at_threshold(&scores, &labels, 0.5).unwrap().recall;
    (auc, rec, secs)
}

fn overfit_probe() {
    println!("== overfit: 2 wells x 200 days ==");
    let synth = SynthConfig {
        n_facilities: 1,
        wells_per_facility: 2,
        t_days: 200,
        seed: 0,
        ..SynthConfig::default()
    };
    let mut synth = synth;
    for a in &mut synth.anomalies {
        a.rate *= 4.0;
    }
    let (topology, mats, frames) = dataset(&synth, &indicator_feat(), &RuleConfig::default());
    let window = 6;
    let all = samples_std(&mats, &frames, window, |_, _| true);
    let pos = all.iter().filter(|s| s.y).count();
    println!("samples {} positives {}", all.len(), pos);
    let mcfg = ModelConfig { gat_dim: 6, lstm_hidden: 12, ..ModelConfig::default() };
    for lr in [3e-3, 1e-2, 3e-2] {
        for kind in [ModelKind::LstmOnly, ModelKind::TemporalGat] {
            let tcfg = TrainConfig {
                lr,
                epochs: 200,
                batch_size: 32,
                val_frac: 0.0,
                seed: 0,
                ..TrainConfig::default()
            };
            let (auc, _, secs) =
                fit_score(kind, &mcfg, &tcfg, window, &topology, &all, &all, &all);
            println!("lr {lr:<6} {:<12} train-auc {auc:.4}  {secs:.1}s", kind.name());
        }
    }
}

fn bench_probe() {
    println!("== benchmark: 12 wells x 730 days, seeds 0-4 ==");
    let window = 14;
    let fast = std::env::args().nth(2).as_deref() == Some("fast");
    let fac_rate: f64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.07);
    // (lr, epochs, val_frac, patience, batch, gat_dim, lstm_hidden)
    let grid: &[(f64, usize, f64, usize, usize, usize, usize)] = if fast {
        &[(1e-3, 30, 0.0, 1, 64, 6, 12), (1e-3, 30, 0.0, 1, 64, 8, 16)]
    } else {
        &[(1e-3, 100, 0.15, 10, 64, 6, 12)]
    };
    for &(lr, epochs, val_frac, patience, batch, gat_dim, lstm_hidden) in grid {
        println!("-- lr {lr} epochs {epochs} val {val_frac} pat {patience} batch {batch} dims {gat_dim}/{lstm_hidden} fac_rate {fac_rate}");
        let mcfg = ModelConfig { gat_dim, lstm_hidden, ..ModelConfig::default() };
        let mut recalls = (0.0, 0.0);
        for seed in 0..5u64 {
            let mut synth = SynthConfig { t_days: 730, seed, ..SynthConfig::default() };
            for spec in &mut synth.anomalies {
                if matches!(spec.kind, AnomalyKind::FacilityEvent) {
                    spec.rate = fac_rate;
                }
            }
            let (topology, mats, frames) =
                dataset(&synth, &indicator_feat(), &RuleConfig::default());
            let raw: Vec<WindowSample> = {
                let by_well: BTreeMap<&str, &LabelFrame> =
                    frames.iter().map(|f| (f.well_id.as_str(), f)).collect();
                mats.iter()
                    .flat_map(|m| {
                        make_windows(m, by_well[m.well_id.as_str()], window).unwrap()
                    })
                    .collect()
            };
            let cutoff = time_cutoff_at_fraction(&raw, 0.7).unwrap();
            let std_all = samples_std(&mats, &frames, window, |m, t| m.timestamps[t] < cutoff);
            let (tr, te, _) = time_split(std_all.clone(), cutoff).unwrap();
            let tcfg = TrainConfig {
                lr,
                epochs,
                batch_size: batch,
                val_frac,
                early_stop_patience: patience,
                seed,
                ..TrainConfig::default()
            };
            let (ga, gr, gs) = fit_score(
                ModelKind::TemporalGat, &mcfg, &tcfg, window, &topology, &std_all, &tr, &te,
            );
            let (la, lrc, ls) = if fast {
                (0.0, 0.0, 0.0)
            } else {
                fit_score(
                    ModelKind::LstmOnly, &mcfg, &tcfg, window, &topology, &std_all, &tr, &te,
                )
            };
            recalls.0 += gr;
            recalls.1 += lrc;
            println!(
                "seed {seed}: gat auc {ga:.4} rec {gr:.3} ({gs:.0}s) | lstm auc {la:.4} rec {lrc:.3} ({ls:.0}s)"
            );
        }
        println!("mean recall gat {:.3} lstm {:.3}", recalls.0 / 5.0, recalls.1 / 5.0);
    }
}

fn diagnose() {
    println!("== label predictability, 12 wells x 730 days ==");
    for seed in 0..5u64 {
        let synth = SynthConfig { t_days: 730, seed, ..SynthConfig::default() };
        let (_, mats, frames) = dataset(&synth, &indicator_feat(), &RuleConfig::default());
        let window = 8;
        let by_well: BTreeMap<&str, &LabelFrame> =
            frames.iter().map(|f| (f.well_id.as_str(), f)).collect();
        let raw: Vec<WindowSample> = mats
            .iter()
            .flat_map(|m| make_windows(m, by_well[m.well_id.as_str()], window).unwrap())
            .collect();
        let cutoff = time_cutoff_at_fraction(&raw, 0.7).unwrap();

        // Markov oracle: P(y[t] | last 5 labels), fitted on train rows.
        // Bounds what any model could read off the recent label history.
        let state = |f: &LabelFrame, t: usize| -> usize {
            (1..=5).fold(0usize, |acc, j| (acc << 1) | f.y[t - j] as usize)
        };
        let mut hits = vec![0.0f64; 32];
        let mut seen = vec![0.0f64; 32];
        for f in &frames {
            for t in window..f.y.len() {
                if f.timestamps[t] >= cutoff {
                    continue;
                }
                let s = state(f, t);
                seen[s] += 1.0;
                hits[s] += f.y[t] as u8 as f64;
            }
        }
        let mut o1 = Vec::new(); // y[t-1]
        let mut om = Vec::new(); // Markov-5
        let mut labels = Vec::new();
        for f in &frames {
            for t in window..f.y.len() {
                if f.timestamps[t] < cutoff {
                    continue;
                }
                labels.push(f.y[t]);
                o1.push(f.y[t - 1] as u8 as f64);
                let s = state(f, t);
                om.push(if seen[s] > 0.0 { hits[s] / seen[s] } else { 0.5 });
            }
        }
        let n_pos = labels.iter().filter(|&&y| y).count();
        let train_pos: usize = frames
            .iter()
            .flat_map(|f| {
                f.timestamps
                    .iter()
                    .zip(&f.y)
                    .filter(|(ts, _)| **ts < cutoff)
                    .map(|(_, &y)| y as usize)
            })
            .sum();
        let train_rows: usize = frames
            .iter()
            .map(|f| f.timestamps.iter().filter(|ts| **ts < cutoff).count())
            .sum();
        println!(
            "seed {seed}: test rows {} pos {} (rate {:.3} vs train {:.3}) | auc y[t-1] {:.3} | markov5 {:.3}",
            labels.len(),
            n_pos,
            n_pos as f64 / labels.len() as f64,
            train_pos as f64 / train_rows as f64,
            roc_auc(&o1, &labels).unwrap(),
            roc_auc(&om, &labels).unwrap(),
        );

        // rule mix over the whole span
        let names = &frames[0].rule_names;
        let mut fires = vec![0usize; names.len()];
        let mut onsets = 0usize;
        let mut positives = 0usize;
        for f in &frames {
            for t in 0..f.y.len() {
                if f.y[t] {
                    positives += 1;
                    if t == 0 || !f.y[t - 1] {
                        onsets += 1;
                    }
                }
                for (r, mask) in f.rule_mask.iter().enumerate() {
                    fires[r] += mask[t] as usize;
                }
            }
        }
        let mix: Vec<String> =
            names.iter().zip(&fires).map(|(n, c)| format!("{n} {c}")).collect();
        println!(
            "         positives {positives} onsets {onsets} ({:.0}%) | {}",
            100.0 * onsets as f64 / positives as f64,
            mix.join(" | ")
        );

        // decompose gor fires by context
        let (_, _, truth) = {
            let synth2 = SynthConfig { t_days: 730, seed, ..SynthConfig::default() };
            wellwatch::synth::generate(&synth2).unwrap()
        };
        let gor_idx = names.iter().position(|n| n == "gor_deviation").unwrap();
        let mut in_event = 0usize;
        let mut near_event = 0usize;
        let mut clean = 0usize;
        for f in &frames {
            let tm = &truth.mask[&f.well_id];
            for t in 0..f.y.len() {
                if !f.rule_mask[gor_idx][t] {
                    continue;
                }
                if tm[t] {
                    in_event += 1;
                } else if (t.saturating_sub(7)..t).any(|j| tm[j]) {
                    near_event += 1;
                } else {
                    clean += 1;
                }
            }
        }
        println!("         gor fires: in-event {in_event} | within 7d after {near_event} | clean {clean}");
    }
}

fn main() {
    let arg = std::env::args().nth(1).unwrap_or_default();
    if arg == "diag" {
        diagnose();
        return;
    }
    if arg != "bench" {
        overfit_probe();
    }
    if arg != "overfit" {
        bench_probe();
    }
}
