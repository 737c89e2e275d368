//! Temporal and physics-informed feature engineering.
//!
//! Each well's imputed series becomes a T x F matrix over a deterministic
//! feature registry: raw variables, day-over-day deltas (plus one validity
//! column for the unndefined first delta), rolling mean/std pairs, gas-oil
//! ratio and water cut, and missingness indicators. Standardization is
//! fitted on designated training rows only and applied everywhere, so test
//! rows can never influence the transform.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Variable, WellSeries};

/// A series a rolling statistic can target: a raw variable or one of the
/// derived ratio series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SeriesId {
    Raw(Variable),
    Gor,
    WaterCut,
}

impl SeriesId {
    pub fn name(self) -> &'static str {
        match self {
            SeriesId::Raw(v) => v.name(),
            SeriesId::Gor => "gor",
            SeriesId::WaterCut => "water_cut",
        }
    }
}

impl std::fmt::Display for SeriesId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SeriesId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gor" => Ok(SeriesId::Gor),
            "water_cut" => Ok(SeriesId::WaterCut),
            other => Variable::ALL
                .into_iter()
                .find(|v| v.name() == other)
                .map(SeriesId::Raw)
                .ok_or_else(|| Error::Config(format!("unknown series {other:?}"))),
        }
    }
}

impl Serialize for SeriesId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SeriesId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Raw variables included as-is and differenced.
    pub raw_vars: Vec<Variable>,
    /// Series receiving rolling mean/std columns.
    pub rolling_vars: Vec<SeriesId>,
    /// Rolling window length k.
    pub rolling_window: usize,
    /// Denominator guard for the production ratios.
    pub epsilon: f64,
    /// Missingness indicators in the registry. Normally the union of
    /// indicator columns across all wells, so every well shares one F.
    pub indicator_vars: Vec<Variable>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            raw_vars: Variable::ALL.to_vec(),
            rolling_vars: vec![
                SeriesId::Raw(Variable::OilVol),
                SeriesId::Raw(Variable::WellheadPressure),
                SeriesId::Gor,
            ],
            rolling_window: 7,
            epsilon: 1e-6,
            indicator_vars: Vec::new(),
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rolling_window == 0 {
            return Err(Error::Config("rolling_window must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.raw_vars.is_empty() {
            return Err(Error::Config("raw_vars must not be empty".into()));
        }
        let unique: BTreeSet<_> = self.raw_vars.iter().collect();
        if unique.len() != self.raw_vars.len() {
            return Err(Error::Config("raw_vars contains duplicates".into()));
        }
        let unique: BTreeSet<_> = self.rolling_vars.iter().collect();
        if unique.len() != self.rolling_vars.len() {
            return Err(Error::Config("rolling_vars contains duplicates".into()));
        }
        let unique: BTreeSet<_> = self.indicator_vars.iter().collect();
        if unique.len() != self.indicator_vars.len() {
            return Err(Error::Config("indicator_vars contains duplicates".into()));
        }
        Ok(())
    }

    /// Column names and the indicator mask, in registry order: raw vars,
    /// their deltas, the delta-validity column, rolling mean/std pairs, the
    /// two ratios, then missingness indicators.
    pub fn registry(&self) -> (Vec<String>, Vec<bool>) {
        let mut names = Vec::new();
        let mut indicator = Vec::new();
        for v in &self.raw_vars {
            names.push(v.name().to_string());
            indicator.push(false);
        }
        for v in &self.raw_vars {
            names.push(format!("delta_{}", v.name()));
            indicator.push(false);
        }
        names.push("delta_valid".to_string());
        indicator.push(true);
        for s in &self.rolling_vars {
            names.push(format!("roll_mean_{}", s.name()));
            indicator.push(false);
            names.push(format!("roll_std_{}", s.name()));
            indicator.push(false);
        }
        names.push("gor".to_string());
        indicator.push(false);
        names.push("water_cut".to_string());
        indicator.push(false);
        for v in &self.indicator_vars {
            names.push(format!("missing_{}", v.name()));
            indicator.push(true);
        }
        (names, indicator)
    }
}

/// Per-feature affine transform fitted on training rows. Indicator columns
/// carry the identity (mean 0, std 1). `std` already includes the 1e-8
/// floor, so applying is always a plain (x - mean) / std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// One well's feature matrix: T rows over the shared registry.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub well_id: String,
    pub timestamps: Vec<NaiveDate>,
    pub names: Vec<String>,
    /// Marks registry columns that are binary indicators (never rescaled).
    pub indicator_cols: Vec<bool>,
    /// timestamps.len() rows, each names.len() wide, all finite.
    pub values: Vec<Vec<f64>>,
    /// Set once standardization has been fitted/applied.
    pub train_stats: Option<TrainStats>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.len()
    }

    pub fn n_features(&self) -> usize {
        self.names.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

// ----------------------------------------------------------------------
// primitive feature computations
// ----------------------------------------------------------------------

/// Day-over-day differences. The first step has no predecessor: its delta
/// is 0 and the companion validity series is 0 there, 1 everywhere else.
pub fn compute_deltas(xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut deltas = Vec::with_capacity(xs.len());
    let mut valid = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        if t == 0 {
            deltas.push(0.0);
            valid.push(0.0);
        } else {
            deltas.push(xs[t] - xs[t - 1]);
            valid.push(1.0);
        }
    }
    (deltas, valid)
}

/// Rolling mean and population std (divisor k) over trailing windows that
/// include the current step. Steps earlier than k use the truncated prefix,
/// so row t always aggregates min(t+1, k) observations and no rows are
/// dropped here.
pub fn rolling_stats(xs: &[f64], k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if k == 0 {
        return Err(Error::Config("rolling window length must be at least 1".into()));
    }
    // Each window is summed directly rather than via prefix sums: k stays
    // small here and direct summation agrees with naive recomputation to
    // the last bit, with no cancellation against the running total.
    let mut means = Vec::with_capacity(xs.len());
    let mut stds = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        let start = (t + 1).saturating_sub(k);
        let w = (t + 1 - start) as f64;
        let window = &xs[start..=t];
        let mean = window.iter().sum::<f64>() / w;
        let var = window.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / w;
        means.push(mean);
        stds.push(var.sqrt());
    }
    Ok((means, stds))
}

/// Gas-oil ratio and water cut with an epsilon-guarded denominator:
/// GOR = gas / (oil + eps), water cut = water / (oil + water + eps).
/// Rates must be nonnegative, which keeps water cut inside [0, 1).
pub fn production_ratios(
    oil: &[f64],
    gas: &[f64],
    water: &[f64],
    epsilon: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if oil.len() != gas.len() || oil.len() != water.len() {
        return Err(Error::Validation(format!(
            "rate series lengths differ: oil {}, gas {}, water {}",
            oil.len(),
            gas.len(),
            water.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut gor = Vec::with_capacity(oil.len());
    let mut water_cut = Vec::with_capacity(oil.len());
    for t in 0..oil.len() {
        for (name, v) in [("oil", oil[t]), ("gas", gas[t]), ("water", water[t])] {
            if v < 0.0 {
                return Err(Error::Validation(format!("negative {name} rate {v} at step {t}")));
            }
        }
        gor.push(gas[t] / (oil[t] + epsilon));
        water_cut.push(water[t] / (oil[t] + water[t] + epsilon));
    }
    Ok((gor, water_cut))
}

// ----------------------------------------------------------------------
// assembly and standardization
// ----------------------------------------------------------------------

/// Compute the full registry for one imputed well series.
pub fn assemble_feature_matrix(series: &WellSeries, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let (names, indicator_cols) = cfg.registry();
    let t_len = series.len();

    let column = |var: Variable| -> Result<Vec<f64>> {
        series
            .column(var)
            .into_iter()
            .enumerate()
            .map(|(t, v)| {
                v.ok_or_else(|| {
                    Error::Validation(format!(
                        "well {:?}: {var} missing at step {t}; run imputation first",
                        series.well_id
                    ))
                })
            })
            .collect()
    };

    let oil = column(Variable::OilVol)?;
    let gas = column(Variable::GasVol)?;
    let water = column(Variable::WaterVol)?;
    let (gor, water_cut) = production_ratios(&oil, &gas, &water, cfg.epsilon)?;

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    let mut raw: Vec<Vec<f64>> = Vec::with_capacity(cfg.raw_vars.len());
    for &v in &cfg.raw_vars {
        raw.push(column(v)?);
    }
    columns.extend(raw.iter().cloned());

    let mut delta_valid = vec![0.0; t_len];
    for series_vals in &raw {
        let (deltas, valid) = compute_deltas(series_vals);
        delta_valid = valid;
        columns.push(deltas);
    }
    columns.push(delta_valid);

    for &sid in &cfg.rolling_vars {
        let base: Vec<f64> = match sid {
            SeriesId::Raw(v) => column(v)?,
            SeriesId::Gor => gor.clone(),
            SeriesId::WaterCut => water_cut.clone(),
        };
        let (means, stds) = rolling_stats(&base, cfg.rolling_window)?;
        columns.push(means);
        columns.push(stds);
    }

    columns.push(gor);
    columns.push(water_cut);

    for &v in &cfg.indicator_vars {
        let col = series
            .indicators
            .get(&v)
            .map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .unwrap_or_else(|| vec![0.0; t_len]);
        columns.push(col);
    }
    for (var, _) in &series.indicators {
        if !cfg.indicator_vars.contains(var) {
            return Err(Error::Validation(format!(
                "well {:?} has a missingness indicator for {var} that is not in the feature \
                 registry; add it to indicator_vars",
                series.well_id
            )));
        }
    }

    debug_assert_eq!(columns.len(), names.len());
    let mut values = vec![vec![0.0; names.len()]; t_len];
    for (f, col) in columns.iter().enumerate() {
        for (t, &v) in col.iter().enumerate() {
            values[t][f] = v;
        }
    }
    for (t, row) in values.iter().enumerate() {
        for (f, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "feature {:?} at step {t} of well {:?}",
                        names[f], series.well_id
                    ),
                });
            }
        }
    }

    Ok(FeatureMatrix {
        well_id: series.well_id.clone(),
        timestamps: series.records.iter().map(|r| r.date).collect(),
        names,
        indicator_cols,
        values,
        train_stats: None,
    })
}

/// Fit per-feature mean and population std over the masked training rows of
/// several wells. Indicator columns are pinned to the identity transform.
/// The floor max(std, 1e-8) is baked into the returned stats.
pub fn fit_train_stats(matrices: &[(&FeatureMatrix, &[bool])]) -> Result<TrainStats> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Validation("no feature matrices to standardize".into()))?;
    let n_features = first.0.n_features();
    let mut count = 0usize;
    let mut sums = vec![0.0; n_features];
    for (m, mask) in matrices {
        if m.n_features() != n_features {
            return Err(Error::Validation(format!(
                "well {:?} has {} features, expected {n_features}",
                m.well_id,
                m.n_features()
            )));
        }
        if mask.len() != m.n_rows() {
            return Err(Error::Validation(format!(
                "train mask length {} does not match {} rows of well {:?}",
                mask.len(),
                m.n_rows(),
                m.well_id
            )));
        }
        for (row, &keep) in m.values.iter().zip(mask.iter()) {
            if keep {
                count += 1;
                for (s, &v) in sums.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation("standardization requires at least one training row".into()));
    }

    let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; n_features];
    for (m, mask) in matrices {
        for (row, &keep) in m.values.iter().zip(mask.iter()) {
            if keep {
                for (f, &v) in row.iter().enumerate() {
                    let d = v - mean[f];
                    sq[f] += d * d;
                }
            }
        }
    }
    let mut stats = TrainStats {
        mean,
        std: sq.iter().map(|s| (s / count as f64).sqrt().max(1e-8)).collect(),
    };
    for (f, &is_ind) in first.0.indicator_cols.iter().enumerate() {
        if is_ind {
            stats.mean[f] = 0.0;
            stats.std[f] = 1.0;
        }
    }
    Ok(stats)
}

/// z = (x - mean) / std for every row, leaving indicators untouched (their
/// stats are the identity). Records the stats on the result.
pub fn apply_standardization(matrix: &FeatureMatrix, stats: &TrainStats) -> Result<FeatureMatrix> {
    if stats.mean.len() != matrix.n_features() || stats.std.len() != matrix.n_features() {
        return Err(Error::Validation(format!(
            "stats cover {} features but matrix has {}",
            stats.mean.len(),
            matrix.n_features()
        )));
    }
    let mut out = matrix.clone();
    for row in &mut out.values {
        for (f, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[f]) / stats.std[f];
        }
    }
    out.train_stats = Some(stats.clone());
    Ok(out)
}

/// Fit on this matrix's masked rows and transform all of its rows.
pub fn standardize(matrix: &FeatureMatrix, train_mask: &[bool]) -> Result<FeatureMatrix> {
    let stats = fit_train_stats(&[(matrix, train_mask)])?;
    apply_standardization(matrix, &stats)
}
