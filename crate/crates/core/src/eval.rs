//! Threshold-free and thresholded classification metrics.
//!
//! All metrics here are exact: ROC-AUC is the Mann-Whitney rank statistic
//! (ties count one half), curves carry one point per distinct score, and
//! nothing is binned. That keeps results reproducible to the last bit and
//! lets tests compare against brute-force pair counting with `==`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts at a fixed decision threshold. "Positive" is the anomaly class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }
}

/// Confusion counts plus the derived rates at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub confusion: Confusion,
    /// TP/(TP+FP); 0 when nothing was flagged (see `no_positive_predictions`).
    pub precision: f64,
    /// TP/(TP+FN); 0 when there are no positives at all.
    pub recall: f64,
    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub f1: f64,
    /// Set when TP+FP == 0, i.e. precision defaulted to 0 rather than being
    /// measured.
    pub no_positive_predictions: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub false_pos_rate: f64,
    pub true_pos_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

fn validate_scored(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Validation("no samples to evaluate".into()));
    }
    if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite { context: format!("score at index {bad}") });
    }
    Ok(())
}

fn require_both_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Validation(format!(
            "metric undefined with a single class ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Probability that a uniformly random positive outscores a uniformly random
/// negative, with ties counting one half. Computed via average ranks, which
/// is algebraically identical to counting all pos/neg pairs but O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    validate_scored(scores, labels)?;
    let (pos, neg) = require_both_classes(labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Rank sum of positives, 1-based, average rank within tie groups.
    // Ranks are half-integers and counts stay far below 2^53, so every
    // intermediate value is exact in f64.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let p = pos as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Apply the decision rule "flag iff score >= threshold" and count outcomes.
/// The inclusive comparison is a fixed convention; thresholds outside [0, 1]
/// are rejected because scores are probabilities.
pub fn confusion_at_threshold(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<ThresholdMetrics> {
    validate_scored(scores, labels)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut c = Confusion { true_pos: 0, false_pos: 0, true_neg: 0, false_neg: 0 };
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(threshold_metrics(threshold, c))
}

fn threshold_metrics(threshold: f64, confusion: Confusion) -> ThresholdMetrics {
    let flagged = confusion.true_pos + confusion.false_pos;
    let actual_pos = confusion.true_pos + confusion.false_neg;
    let precision = if flagged > 0 { confusion.true_pos as f64 / flagged as f64 } else { 0.0 };
    let recall =
        if actual_pos > 0 { confusion.true_pos as f64 / actual_pos as f64 } else { 0.0 };
    let f1 =
        if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    ThresholdMetrics {
        threshold,
        confusion,
        precision,
        recall,
        f1,
        no_positive_predictions: flagged == 0,
    }
}

/// ROC and precision-recall curves with one point per distinct score,
/// thresholds descending.
///
/// The ROC curve is anchored at (0, 0) with threshold +inf (nothing flagged)
/// and necessarily ends at (1, 1) at the minimum score. The PR curve stops at
/// the first threshold that reaches full recall; points past it only repeat
/// recall 1 at degrading precision, so a perfect classifier's curve stays at
/// precision 1 throughout.
pub fn curves(scores: &[f64], labels: &[bool]) -> Result<(Vec<RocPoint>, Vec<PrPoint>)> {
    validate_scored(scores, labels)?;
    let (pos, neg) = require_both_classes(labels)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut roc = vec![RocPoint { threshold: f64::INFINITY, false_pos_rate: 0.0, true_pos_rate: 0.0 }];
    let mut pr = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut full_recall_seen = false;

    let mut i = 0;
    while i < order.len() {
        let tau = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == tau {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        roc.push(RocPoint {
            threshold: tau,
            false_pos_rate: fp as f64 / neg as f64,
            true_pos_rate: tp as f64 / pos as f64,
        });
        if !full_recall_seen {
            pr.push(PrPoint {
                threshold: tau,
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / pos as f64,
            });
            full_recall_seen = tp == pos;
        }
        i = j;
    }
    Ok((roc, pr))
}

/// Area under a polyline by the trapezoid rule. Points must be ordered with
/// non-decreasing x.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

// ----------------------------------------------------------------------
// reports
// ----------------------------------------------------------------------

/// Scores and labels one model produced on one evaluation split.
#[derive(Debug, Clone)]
pub struct ModelRun {
    pub model_name: String,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Split-level metadata shared by every model in a comparison.
#[derive(Debug, Clone)]
pub struct ReportContext {
    pub split_kind: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub threshold: f64,
    pub anomaly_rate_train: f64,
}

/// Everything measured for one model on one split. Serializes losslessly;
/// see `artifacts` for the on-disk encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_name: String,
    pub split_kind: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub threshold: f64,
    pub roc_auc: f64,
    pub precision_anomaly: f64,
    pub recall_anomaly: f64,
    pub f1_anomaly: f64,
    pub confusion: Confusion,
    pub anomaly_rate_train: f64,
    pub anomaly_rate_test: f64,
    pub roc_curve: Vec<RocPoint>,
    pub pr_curve: Vec<PrPoint>,
}

/// Evaluate each model run and render the aligned comparison table.
///
/// All runs must score the same samples: equal lengths and identical label
/// vectors. Mixing splits in one comparison is a hard error because the
/// resulting table would juxtapose incomparable numbers.
pub fn build_report(runs: &[ModelRun], ctx: &ReportContext) -> Result<(Vec<EvalReport>, String)> {
    if runs.is_empty() {
        return Err(Error::Validation("no model runs to report".into()));
    }
    for run in &runs[1..] {
        if run.labels != runs[0].labels {
            return Err(Error::Validation(format!(
                "model {:?} was evaluated on different samples than {:?} ({} vs {} labels)",
                run.model_name,
                runs[0].model_name,
                run.labels.len(),
                runs[0].labels.len()
            )));
        }
    }

    let mut reports = Vec::with_capacity(runs.len());
    for run in runs {
        let auc = roc_auc(&run.scores, &run.labels)?;
        let at_tau = confusion_at_threshold(&run.scores, &run.labels, ctx.threshold)?;
        let (roc_curve, pr_curve) = curves(&run.scores, &run.labels)?;
        let positives = run.labels.iter().filter(|&&l| l).count();
        reports.push(EvalReport {
            model_name: run.model_name.clone(),
            split_kind: ctx.split_kind.clone(),
            seed: ctx.seed,
            config_fingerprint: ctx.config_fingerprint.clone(),
            threshold: ctx.threshold,
            roc_auc: auc,
            precision_anomaly: at_tau.precision,
            recall_anomaly: at_tau.recall,
            f1_anomaly: at_tau.f1,
            confusion: at_tau.confusion,
            anomaly_rate_train: ctx.anomaly_rate_train,
            anomaly_rate_test: positives as f64 / run.labels.len() as f64,
            roc_curve,
            pr_curve,
        });
    }
    let table = comparison_table(&reports);
    Ok((reports, table))
}

/// Fixed-width text table, one row per model.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let header = ["Model", "ROC-AUC", "Precision (Anomaly)", "Recall (Anomaly)", "F1-score"];
    let mut rows: Vec<[String; 5]> = vec![header.map(String::from)];
    for r in reports {
        rows.push([
            r.model_name.clone(),
            format!("{:.3}", r.roc_auc),
            format!("{:.3}", r.precision_anomaly),
            format!("{:.3}", r.recall_anomaly),
            format!("{:.3}", r.f1_anomaly),
        ]);
    }
    let widths: Vec<usize> =
        (0..5).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> =
            row.iter().zip(&widths).map(|(cell, &w)| format!("{cell:<w$}")).collect();
        out.push_str(line.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let sep: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&sep.join("-|-"));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn labels(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b != 0).collect()
    }

    /// Brute-force pair counting: wins plus half-ties over all pos/neg pairs.
    fn auc_by_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0u64;
        for (i, &yi) in labels.iter().enumerate() {
            if !yi {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / pairs as f64
    }

    #[test]
    fn four_sample_worked_example() {
        let auc = roc_auc(&[0.2, 0.6, 0.4, 0.8], &labels(&[0, 0, 1, 1])).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn perfect_ranking_is_one_and_constant_scores_half() {
        let y = labels(&[0, 0, 1, 1]);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &y).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5, 0.5], &y).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(roc_auc(&[0.1, 0.2], &labels(&[1, 1])).is_err());
        assert!(roc_auc(&[0.1, 0.2], &labels(&[0, 0])).is_err());
        assert!(curves(&[0.1, 0.2], &labels(&[0, 0])).is_err());
    }

    #[test]
    fn rank_auc_equals_pair_counting_exactly() {
        let mut rng = SplitMix64::new(31);
        for case in 0..300 {
            let n = 2 + rng.next_below(199);
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.next_below(20) as f64) / 10.0 - 0.5).collect();
            let mut y: Vec<bool> = (0..n).map(|_| rng.chance(0.3)).collect();
            y[0] = true;
            y[1] = false;
            let fast = roc_auc(&scores, &y).unwrap();
            let slow = auc_by_pairs(&scores, &y);
            assert_eq!(fast, slow, "case {case}: rank {fast} vs pairs {slow}");
        }
    }

    #[test]
    fn monotone_transform_preserves_auc() {
        let mut rng = SplitMix64::new(77);
        let scores: Vec<f64> = (0..150).map(|_| rng.next_below(40) as f64 / 8.0).collect();
        let mut y: Vec<bool> = (0..150).map(|_| rng.chance(0.4)).collect();
        y[0] = true;
        y[1] = false;
        let base = roc_auc(&scores, &y).unwrap();
        // 2x + 1 is exact in f64 for these values: order and ties preserved.
        let shifted: Vec<f64> = scores.iter().map(|&s| 2.0 * s + 1.0).collect();
        assert_eq!(roc_auc(&shifted, &y).unwrap(), base);
    }

    #[test]
    fn confusion_worked_example_and_boundaries() {
        let y = labels(&[1, 0]);
        let m = confusion_at_threshold(&[0.6, 0.4], &y, 0.5).unwrap();
        assert_eq!(
            m.confusion,
            Confusion { true_pos: 1, false_pos: 0, true_neg: 1, false_neg: 0 }
        );
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        // threshold 0 flags everything: recall 1
        let m0 = confusion_at_threshold(&[0.6, 0.4], &y, 0.0).unwrap();
        assert_eq!(m0.recall, 1.0);
        assert_eq!(m0.confusion.false_pos, 1);

        // threshold 1 flags only exact ones
        let m1 = confusion_at_threshold(&[1.0, 0.4, 0.99], &labels(&[1, 0, 1]), 1.0).unwrap();
        assert_eq!(m1.confusion.true_pos, 1);
        assert_eq!(m1.confusion.false_neg, 1);

        assert!(confusion_at_threshold(&[0.5], &labels(&[1]), 1.5).is_err());
    }

    #[test]
    fn counts_always_total_n() {
        let mut rng = SplitMix64::new(4);
        let scores: Vec<f64> = (0..97).map(|_| rng.next_f64()).collect();
        let y: Vec<bool> = (0..97).map(|_| rng.chance(0.2)).collect();
        for tau in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let m = confusion_at_threshold(&scores, &y, tau).unwrap();
            assert_eq!(m.confusion.total(), 97);
        }
    }

    #[test]
    fn roc_curve_hand_trace() {
        let (roc, pr) = curves(&[0.2, 0.6, 0.4, 0.8], &labels(&[0, 0, 1, 1])).unwrap();
        // anchor + one point per distinct threshold (0.8, 0.6, 0.4, 0.2)
        assert_eq!(roc.len(), 5);
        assert_eq!(roc[0].threshold, f64::INFINITY);
        assert_eq!((roc[0].false_pos_rate, roc[0].true_pos_rate), (0.0, 0.0));
        assert!(roc
            .iter()
            .any(|p| p.false_pos_rate == 0.5 && p.true_pos_rate == 1.0));
        let last = roc.last().unwrap();
        assert_eq!((last.false_pos_rate, last.true_pos_rate), (1.0, 1.0));
        // PR stops at full recall: thresholds 0.8 (r=0.5) and 0.4 (r=1.0)
        assert_eq!(pr.last().unwrap().recall, 1.0);

        // thresholds strictly descending, rates non-decreasing
        for w in roc.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[1].false_pos_rate >= w[0].false_pos_rate);
            assert!(w[1].true_pos_rate >= w[0].true_pos_rate);
        }
    }

    #[test]
    fn perfect_classifier_pr_curve_stays_at_one() {
        let (_, pr) = curves(&[0.9, 0.8, 0.2, 0.1], &labels(&[1, 1, 0, 0])).unwrap();
        assert!(pr.iter().all(|p| p.precision == 1.0));
        assert_eq!(pr.last().unwrap().recall, 1.0);
    }

    #[test]
    fn trapezoid_area_matches_rank_auc() {
        let mut rng = SplitMix64::new(12);
        for _ in 0..50 {
            let n = 5 + rng.next_below(120);
            let scores: Vec<f64> = (0..n).map(|_| rng.next_below(15) as f64 / 14.0).collect();
            let mut y: Vec<bool> = (0..n).map(|_| rng.chance(0.35)).collect();
            y[0] = true;
            y[1] = false;
            let auc = roc_auc(&scores, &y).unwrap();
            let (roc, _) = curves(&scores, &y).unwrap();
            let pts: Vec<(f64, f64)> =
                roc.iter().map(|p| (p.false_pos_rate, p.true_pos_rate)).collect();
            assert!((trapezoid_area(&pts) - auc).abs() < 1e-9);
        }
    }

    #[test]
    fn report_round_trips_and_table_aligns() {
        let runs = vec![
            ModelRun {
                model_name: "logistic".into(),
                scores: vec![0.2, 0.6, 0.4, 0.8],
                labels: labels(&[0, 0, 1, 1]),
            },
            ModelRun {
                model_name: "lstm".into(),
                scores: vec![0.1, 0.2, 0.7, 0.9],
                labels: labels(&[0, 0, 1, 1]),
            },
        ];
        let ctx = ReportContext {
            split_kind: "random".into(),
            seed: 3,
            config_fingerprint: "abc123".into(),
            threshold: 0.5,
            anomaly_rate_train: 0.04,
        };
        let (reports, table) = build_report(&runs, &ctx).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].roc_auc, 0.75);
        assert_eq!(reports[1].roc_auc, 1.0);
        assert_eq!(reports[0].anomaly_rate_test, 0.5);

        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4); // header, rule, two rows
        assert!(lines[0].contains("ROC-AUC"));
        assert!(lines[2].starts_with("logistic"));

        let encoded = ron::to_string(&reports[0]).unwrap();
        let back: EvalReport = ron::from_str(&encoded).unwrap();
        assert_eq!(back, reports[0]);
    }

    #[test]
    fn mismatched_runs_are_rejected() {
        let runs = vec![
            ModelRun { model_name: "a".into(), scores: vec![0.1, 0.9], labels: labels(&[0, 1]) },
            ModelRun { model_name: "b".into(), scores: vec![0.4], labels: labels(&[1]) },
        ];
        let ctx = ReportContext {
            split_kind: "time".into(),
            seed: 0,
            config_fingerprint: String::new(),
            threshold: 0.5,
            anomaly_rate_train: 0.0,
        };
        assert!(build_report(&runs, &ctx).is_err());
    }
}
