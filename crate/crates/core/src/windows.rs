//! Causal temporal windows and train/test splits.
//!
//! A sample at target index t packages the r feature rows strictly before t
//! (copied, so later edits to the source matrix cannot reach it) with the
//! label at t. Splits either shuffle samples with a seeded permutation or
//! cut by target date; the time split also reports per-side anomaly rates
//! so distribution shift between periods is visible in the artifacts.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::labels::LabelFrame;
use crate::rng::{derive_seed, SplitMix64};

/// One supervised example: the window of feature rows t-r..t-1 and the
/// label at t.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub well_id: String,
    /// Target row index within the source series.
    pub t: usize,
    /// Target date (the date being predicted).
    pub date: NaiveDate,
    /// r x F window, rows ordered oldest first; references only rows
    /// strictly before t.
    pub x: Tensor,
    pub y: bool,
}

/// How to partition samples into train and test.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Seeded uniform shuffle, first `ratio` of samples become train.
    Random { ratio: f64, seed: u64 },
    /// Train strictly before the cutoff date, test at or after it.
    Time { cutoff: NaiveDate },
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if let SplitSpec::Random { ratio, .. } = self {
            if !(*ratio > 0.0 && *ratio < 1.0) {
                return Err(Error::Config(format!(
                    "random split ratio {ratio} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// Anomaly-rate and date-range summary for one side of a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub count: usize,
    pub anomalies: usize,
    pub anomaly_rate: f64,
    pub first_date: NaiveDate,
    pub last_date: NaiveDate,
}

impl SplitSummary {
    pub fn from_samples(samples: &[WindowSample]) -> Option<SplitSummary> {
        let first_date = samples.iter().map(|s| s.date).min()?;
        let last_date = samples.iter().map(|s| s.date).max()?;
        let anomalies = samples.iter().filter(|s| s.y).count();
        Some(SplitSummary {
            count: samples.len(),
            anomalies,
            anomaly_rate: anomalies as f64 / samples.len() as f64,
            first_date,
            last_date,
        })
    }
}

/// Train-vs-test comparison emitted alongside a time split, where the label
/// distribution routinely shifts between periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub cutoff: NaiveDate,
    pub train: SplitSummary,
    pub test: SplitSummary,
}

/// Build one sample per target index t in r..T. Feature rows are copied
/// into the sample so the window is immutable history.
pub fn make_windows(
    features: &FeatureMatrix,
    labels: &LabelFrame,
    r: usize,
) -> Result<Vec<WindowSample>> {
    if r == 0 {
        return Err(Error::Config("window length must be at least 1".into()));
    }
    if features.well_id != labels.well_id || features.timestamps != labels.timestamps {
        return Err(Error::Validation(format!(
            "features ({:?}, {} rows) and labels ({:?}, {} rows) are not aligned",
            features.well_id,
            features.n_rows(),
            labels.well_id,
            labels.y.len()
        )));
    }
    let n_features = features.n_features();
    let mut samples = Vec::with_capacity(features.n_rows().saturating_sub(r));
    for t in r..features.n_rows() {
        let mut data = Vec::with_capacity(r * n_features);
        for row in &features.values[t - r..t] {
            data.extend_from_slice(row);
        }
        samples.push(WindowSample {
            well_id: features.well_id.clone(),
            t,
            date: features.timestamps[t],
            x: Tensor::from_vec(r, n_features, data)?,
            y: labels.y[t],
        });
    }
    Ok(samples)
}

/// Keeps the split's random stream independent of other consumers of the
/// same user-facing seed.
const SHUFFLE_SALT: u64 = 0x73706c6974;

/// Seeded shuffle then partition: floor(n * ratio) samples train, rest test.
pub fn random_split(
    samples: Vec<WindowSample>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<WindowSample>, Vec<WindowSample>)> {
    SplitSpec::Random { ratio, seed }.validate()?;
    let mut samples = samples;
    let mut rng = SplitMix64::new(derive_seed(seed, SHUFFLE_SALT));
    rng.shuffle(&mut samples);
    let n_train = (samples.len() as f64 * ratio).floor() as usize;
    let test = samples.split_off(n_train);
    Ok((samples, test))
}

/// Partition by target date at the cutoff; both sides must be non-empty.
pub fn time_split(
    samples: Vec<WindowSample>,
    cutoff: NaiveDate,
) -> Result<(Vec<WindowSample>, Vec<WindowSample>, ShiftReport)> {
    let (train, test): (Vec<_>, Vec<_>) =
        samples.into_iter().partition(|s| s.date < cutoff);
    let (Some(train_summary), Some(test_summary)) =
        (SplitSummary::from_samples(&train), SplitSummary::from_samples(&test))
    else {
        return Err(Error::Config(format!(
            "time-split cutoff {cutoff} leaves an empty side (train {}, test {})",
            train.len(),
            test.len()
        )));
    };
    let report = ShiftReport { cutoff, train: train_summary, test: test_summary };
    Ok((train, test, report))
}

/// Earliest cutoff date that puts at least `frac` of the samples in train.
/// Candidates are the distinct target dates, so the returned cutoff always
/// produces a valid two-sided time split on these samples.
pub fn time_cutoff_at_fraction(samples: &[WindowSample], frac: f64) -> Result<NaiveDate> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!("time-split fraction {frac} outside (0, 1)")));
    }
    let mut dates: Vec<NaiveDate> = samples.iter().map(|s| s.date).collect();
    dates.sort_unstable();
    dates.dedup();
    if dates.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 distinct target dates to time-split, got {}",
            dates.len()
        )));
    }
    let n = samples.len() as f64;
    // walk distinct dates; cutting at dates[i] puts samples with date <
    // dates[i] in train
    let mut best = dates[1];
    for &candidate in &dates[1..] {
        best = candidate;
        let in_train = samples.iter().filter(|s| s.date < candidate).count();
        if in_train as f64 >= frac * n {
            break;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn day(i: usize) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Days::new(i as u64)
    }

    /// T x 2 matrix whose rows are [row_index, 10*row_index].
    fn toy_features(well: &str, n: usize) -> FeatureMatrix {
        FeatureMatrix {
            well_id: well.to_string(),
            timestamps: (0..n).map(day).collect(),
            names: vec!["a".to_string(), "b".to_string()],
            indicator_cols: vec![false, false],
            values: (0..n).map(|i| vec![i as f64, 10.0 * i as f64]).collect(),
            train_stats: None,
        }
    }

    fn toy_labels(well: &str, y: Vec<bool>) -> LabelFrame {
        LabelFrame {
            well_id: well.to_string(),
            timestamps: (0..y.len()).map(day).collect(),
            rule_names: vec!["r".to_string()],
            rule_mask: vec![y.clone()],
            y,
        }
    }

    #[test]
    fn window_rows_are_the_r_steps_before_target() {
        let features = toy_features("W1", 12);
        let labels = toy_labels("W1", vec![false; 12]);
        let samples = make_windows(&features, &labels, 3).unwrap();
        let s = samples.iter().find(|s| s.t == 10).unwrap();
        assert_eq!(s.x.shape(), [3, 2]);
        assert_eq!(s.x.row_slice(0), &[7.0, 70.0]);
        assert_eq!(s.x.row_slice(1), &[8.0, 80.0]);
        assert_eq!(s.x.row_slice(2), &[9.0, 90.0]);
        assert_eq!(s.date, day(10));
    }

    #[test]
    fn sample_count_is_t_minus_r() {
        let features = toy_features("W1", 5);
        let labels = toy_labels("W1", vec![false, false, false, true, true]);
        let samples = make_windows(&features, &labels, 3).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].t, 3);
        assert_eq!(samples[1].t, 4);
        assert!(samples[0].y && samples[1].y);

        // T <= r yields nothing
        assert!(make_windows(&toy_features("W1", 3), &toy_labels("W1", vec![false; 3]), 3)
            .unwrap()
            .is_empty());
        assert!(make_windows(&toy_features("W1", 2), &toy_labels("W1", vec![false; 2]), 3)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn zero_window_and_misalignment_are_rejected() {
        let features = toy_features("W1", 5);
        let labels = toy_labels("W1", vec![false; 5]);
        assert!(make_windows(&features, &labels, 0).is_err());
        let other_well = toy_labels("W2", vec![false; 5]);
        assert!(make_windows(&features, &other_well, 3).is_err());
        let short = toy_labels("W1", vec![false; 4]);
        assert!(make_windows(&features, &short, 3).is_err());
    }

    #[test]
    fn future_perturbations_never_reach_a_window() {
        let labels = toy_labels("W1", vec![false; 20]);
        let baseline = make_windows(&toy_features("W1", 20), &labels, 5).unwrap();
        for target in 5..20 {
            for future in target..20 {
                let mut perturbed = toy_features("W1", 20);
                perturbed.values[future][0] += 1e6;
                perturbed.values[future][1] = -999.0;
                let again = make_windows(&perturbed, &labels, 5).unwrap();
                let before = baseline.iter().find(|s| s.t == target).unwrap();
                let after = again.iter().find(|s| s.t == target).unwrap();
                assert_eq!(before.x, after.x, "target {target} saw edit at {future}");
            }
        }
    }

    fn keys(samples: &[WindowSample]) -> BTreeSet<(String, usize)> {
        samples.iter().map(|s| (s.well_id.clone(), s.t)).collect()
    }

    #[test]
    fn random_split_partitions_at_ratio() {
        let features = toy_features("W1", 104);
        let labels = toy_labels("W1", vec![false; 104]);
        let samples = make_windows(&features, &labels, 4).unwrap();
        assert_eq!(samples.len(), 100);
        let all = keys(&samples);
        let (train, test) = random_split(samples, 0.8, 7).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        let train_keys = keys(&train);
        let test_keys = keys(&test);
        assert!(train_keys.is_disjoint(&test_keys));
        let union: BTreeSet<_> = train_keys.union(&test_keys).cloned().collect();
        assert_eq!(union, all);
    }

    #[test]
    fn random_split_is_seed_deterministic() {
        let mk = || {
            let features = toy_features("W1", 54);
            let labels = toy_labels("W1", vec![false; 54]);
            make_windows(&features, &labels, 4).unwrap()
        };
        let (train_a, test_a) = random_split(mk(), 0.7, 42).unwrap();
        let (train_b, test_b) = random_split(mk(), 0.7, 42).unwrap();
        assert_eq!(train_a, train_b);
        assert_eq!(test_a, test_b);
        let (train_c, _) = random_split(mk(), 0.7, 43).unwrap();
        assert_ne!(keys(&train_a), keys(&train_c), "different seeds should differ");
    }

    #[test]
    fn degenerate_ratios_are_rejected() {
        let features = toy_features("W1", 10);
        let labels = toy_labels("W1", vec![false; 10]);
        let samples = make_windows(&features, &labels, 2).unwrap();
        assert!(random_split(samples.clone(), 1.0, 1).is_err());
        assert!(random_split(samples, 0.0, 1).is_err());
    }

    #[test]
    fn time_split_orders_train_before_test() {
        let features = toy_features("W1", 40);
        // anomalies only in the late period
        let y: Vec<bool> = (0..40).map(|i| i >= 30).collect();
        let labels = toy_labels("W1", y);
        let samples = make_windows(&features, &labels, 5).unwrap();
        let cutoff = day(25);
        let (train, test, report) = time_split(samples, cutoff).unwrap();
        let max_train = train.iter().map(|s| s.date).max().unwrap();
        let min_test = test.iter().map(|s| s.date).min().unwrap();
        assert!(max_train < min_test);
        assert!(min_test >= cutoff);
        assert_eq!(report.train.count + report.test.count, 35);
        assert_eq!(report.train.anomaly_rate, 0.0);
        assert!(report.test.anomaly_rate > report.train.anomaly_rate);
        assert_eq!(report.test.anomalies, 10);
        assert_eq!(report.train.first_date, day(5));
        assert_eq!(report.test.last_date, day(39));
    }

    #[test]
    fn one_sided_cutoffs_are_rejected() {
        let features = toy_features("W1", 20);
        let labels = toy_labels("W1", vec![false; 20]);
        let samples = make_windows(&features, &labels, 5).unwrap();
        // everything is before day 100: empty test
        assert!(time_split(samples.clone(), day(100)).is_err());
        // nothing is before day 0: empty train
        assert!(time_split(samples, day(0)).is_err());
    }

    #[test]
    fn fractional_cutoff_hits_requested_mass() {
        let features = toy_features("W1", 105);
        let labels = toy_labels("W1", vec![false; 105]);
        let samples = make_windows(&features, &labels, 5).unwrap();
        let cutoff = time_cutoff_at_fraction(&samples, 0.7).unwrap();
        let (train, test, _) = time_split(samples, cutoff).unwrap();
        assert_eq!(train.len(), 70);
        assert_eq!(test.len(), 30);
        assert!(time_cutoff_at_fraction(&train, 1.0).is_err());
    }
}
