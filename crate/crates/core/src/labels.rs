//! Weak anomaly labels from three physically motivated rule families.
//!
//! Each rule compares today's observation against trailing statistics that
//! end at yesterday, so a label at time t depends only on data up to t; the
//! anomaly itself never inflates the baseline it is judged against. A step
//! is labeled anomalous when at least one rule fires; the per-rule firings
//! are kept alongside the aggregate for audit.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{rolling_stats, FeatureMatrix};

/// Thresholds for the three rule families. The constants are engineering
/// judgment, deliberately explicit and configurable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleConfig {
    /// Production-drop rule: fire when oil falls below (1 - drop_frac) of
    /// the trailing mean.
    pub drop_frac: f64,
    /// Production-drop rule: minimum producing hours for a step to count
    /// (excludes planned downtime).
    pub min_onstream_hrs: f64,
    /// Pressure-flow rule: z-score magnitude the oil delta must fall below.
    pub zscore_flow: f64,
    /// Pressure-flow rule: z-score the wellhead-pressure delta must exceed.
    pub zscore_pressure: f64,
    /// GOR rule: deviations beyond gor_m trailing standard deviations fire.
    pub gor_m: f64,
    /// Trailing window for the pressure-flow z-scores.
    pub zscore_window: usize,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            drop_frac: 0.40,
            min_onstream_hrs: 12.0,
            zscore_flow: 2.0,
            zscore_pressure: 2.0,
            gor_m: 3.0,
            zscore_window: 30,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.drop_frac > 0.0 && self.drop_frac < 1.0) {
            return Err(Error::Config(format!("drop_frac {} outside (0, 1)", self.drop_frac)));
        }
        for (name, v) in [
            ("min_onstream_hrs", self.min_onstream_hrs),
            ("zscore_flow", self.zscore_flow),
            ("zscore_pressure", self.zscore_pressure),
            ("gor_m", self.gor_m),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.zscore_window == 0 {
            return Err(Error::Config("zscore_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-step weak labels for one well, with the per-rule audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFrame {
    pub well_id: String,
    pub timestamps: Vec<NaiveDate>,
    pub rule_names: Vec<String>,
    /// One column per rule, each timestamps.len() long.
    pub rule_mask: Vec<Vec<bool>>,
    /// y_t = 1 iff any rule fired at t.
    pub y: Vec<bool>,
}

fn feature_column(features: &FeatureMatrix, name: &str) -> Result<Vec<f64>> {
    let idx = features.column_index(name).ok_or_else(|| {
        Error::Validation(format!(
            "well {:?}: feature registry has no column {name:?}",
            features.well_id
        ))
    })?;
    Ok(features.values.iter().map(|row| row[idx]).collect())
}

/// Unexpected production drop: oil falls strictly below
/// (1 - drop_frac) * trailing mean, while the well was actually producing
/// (on_stream >= min_onstream_hrs) and the trailing mean is positive. The
/// trailing mean is yesterday's rolling mean, so the drop itself is not
/// averaged into the baseline.
pub fn rule_production_drop(features: &FeatureMatrix, cfg: &RuleConfig) -> Result<Vec<bool>> {
    let oil = feature_column(features, "oil_vol")?;
    let oil_mean = feature_column(features, "roll_mean_oil_vol")?;
    let on_stream = feature_column(features, "on_stream_hrs")?;
    let mut mask = vec![false; oil.len()];
    for t in 1..oil.len() {
        let baseline = oil_mean[t - 1];
        mask[t] = baseline > 0.0
            && on_stream[t] >= cfg.min_onstream_hrs
            && oil[t] < (1.0 - cfg.drop_frac) * baseline;
    }
    Ok(mask)
}

/// Abnormal pressure-flow relationship: the day's oil change is extremely
/// negative while the wellhead-pressure change is extremely positive, both
/// as z-scores against trailing delta statistics ending yesterday
/// (blockage/diversion signature). Zero trailing variance makes a z-score
/// undefined; it is treated as 0 and cannot fire.
pub fn rule_pressure_flow(features: &FeatureMatrix, cfg: &RuleConfig) -> Result<Vec<bool>> {
    let d_oil = feature_column(features, "delta_oil_vol")?;
    let d_whp = feature_column(features, "delta_wellhead_pressure")?;
    let z_oil = trailing_zscores(&d_oil, cfg.zscore_window)?;
    let z_whp = trailing_zscores(&d_whp, cfg.zscore_window)?;
    Ok(z_oil
        .iter()
        .zip(&z_whp)
        .map(|(&zo, &zp)| zo <= -cfg.zscore_flow && zp >= cfg.zscore_pressure)
        .collect())
}

/// z_t = (x_t - mean_{t-1}) / std_{t-1} with trailing-window statistics, 0
/// whenever the statistics are unavailable (t = 0) or degenerate (std 0).
fn trailing_zscores(xs: &[f64], window: usize) -> Result<Vec<f64>> {
    let (means, stds) = rolling_stats(xs, window)?;
    let mut z = vec![0.0; xs.len()];
    for t in 1..xs.len() {
        if stds[t - 1] > 0.0 {
            z[t] = (xs[t] - means[t - 1]) / stds[t - 1];
        }
    }
    Ok(z)
}

/// Extreme GOR deviation: today's gas-oil ratio sits strictly more than
/// gor_m trailing standard deviations from yesterday's trailing mean. The
/// sigma > 0 guard keeps flat sensors from firing, and the strict inequality
/// pins boundary behavior (a spike at exactly gor_m sigma does not fire).
pub fn rule_gor_deviation(features: &FeatureMatrix, cfg: &RuleConfig) -> Result<Vec<bool>> {
    let gor = feature_column(features, "gor")?;
    let gor_mean = feature_column(features, "roll_mean_gor")?;
    let gor_std = feature_column(features, "roll_std_gor")?;
    let mut mask = vec![false; gor.len()];
    for t in 1..gor.len() {
        let (mu, sigma) = (gor_mean[t - 1], gor_std[t - 1]);
        mask[t] = sigma > 0.0 && (gor[t] - mu).abs() > cfg.gor_m * sigma;
    }
    Ok(mask)
}

/// OR the rule masks into the aggregate label vector.
pub fn aggregate_labels(
    well_id: &str,
    timestamps: &[NaiveDate],
    rules: Vec<(String, Vec<bool>)>,
) -> Result<LabelFrame> {
    for (name, mask) in &rules {
        if mask.len() != timestamps.len() {
            return Err(Error::Validation(format!(
                "rule {name:?} produced {} firings for {} timestamps",
                mask.len(),
                timestamps.len()
            )));
        }
    }
    let mut y = vec![false; timestamps.len()];
    for (_, mask) in &rules {
        for (slot, &fired) in y.iter_mut().zip(mask) {
            *slot = *slot || fired;
        }
    }
    let (rule_names, rule_mask) = rules.into_iter().unzip();
    Ok(LabelFrame {
        well_id: well_id.to_string(),
        timestamps: timestamps.to_vec(),
        rule_names,
        rule_mask,
        y,
    })
}

/// Run all three rule families over one well and aggregate.
pub fn label_series(features: &FeatureMatrix, cfg: &RuleConfig) -> Result<LabelFrame> {
    cfg.validate()?;
    let rules = vec![
        ("production_drop".to_string(), rule_production_drop(features, cfg)?),
        ("pressure_flow".to_string(), rule_pressure_flow(features, cfg)?),
        ("gor_deviation".to_string(), rule_gor_deviation(features, cfg)?),
    ];
    aggregate_labels(&features.well_id, &features.timestamps, rules)
}

impl LabelFrame {
    /// Delimited audit table: date, aggregate, then one column per rule.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("date,y");
        for name in &self.rule_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (t, date) in self.timestamps.iter().enumerate() {
            out.push_str(&format!("{date},{}", u8::from(self.y[t])));
            for mask in &self.rule_mask {
                out.push_str(&format!(",{}", u8::from(mask[t])));
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`LabelFrame::to_csv`].
    pub fn from_csv(text: &str, well_id: &str) -> Result<LabelFrame> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Validation(format!("empty label table for {well_id:?}")))?;
        let columns: Vec<&str> = header.split(',').collect();
        if columns.len() < 2 || columns[0] != "date" || columns[1] != "y" {
            return Err(Error::Validation(format!(
                "label table for {well_id:?} has unexpected header {header:?}"
            )));
        }
        let rule_names: Vec<String> = columns[2..].iter().map(|s| s.to_string()).collect();
        let mut timestamps = Vec::new();
        let mut y = Vec::new();
        let mut rule_mask = vec![Vec::new(); rule_names.len()];
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != columns.len() {
                return Err(Error::Validation(format!(
                    "label table for {well_id:?}: row {} has {} cells, expected {}",
                    i + 1,
                    cells.len(),
                    columns.len()
                )));
            }
            let date = NaiveDate::parse_from_str(cells[0], "%Y-%m-%d").map_err(|_| {
                Error::Validation(format!(
                    "label table for {well_id:?}: bad date {:?} at row {}",
                    cells[0],
                    i + 1
                ))
            })?;
            timestamps.push(date);
            y.push(parse_bit(cells[1], well_id, i + 1)?);
            for (k, mask) in rule_mask.iter_mut().enumerate() {
                mask.push(parse_bit(cells[2 + k], well_id, i + 1)?);
            }
        }
        let frame =
            LabelFrame { well_id: well_id.to_string(), timestamps, rule_names, rule_mask, y };
        frame.check_consistency()?;
        Ok(frame)
    }

    /// The audit invariant: y is exactly the OR of the rule columns.
    pub fn check_consistency(&self) -> Result<()> {
        for (t, &yt) in self.y.iter().enumerate() {
            let any = self.rule_mask.iter().any(|mask| mask[t]);
            if yt != any {
                return Err(Error::Validation(format!(
                    "well {:?}: label at step {t} is {} but rules say {}",
                    self.well_id, u8::from(yt), u8::from(any)
                )));
            }
        }
        Ok(())
    }

    pub fn anomaly_rate(&self) -> f64 {
        if self.y.is_empty() {
            return 0.0;
        }
        self.y.iter().filter(|&&b| b).count() as f64 / self.y.len() as f64
    }
}

fn parse_bit(cell: &str, well_id: &str, row: usize) -> Result<bool> {
    match cell {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Validation(format!(
            "label table for {well_id:?}: bad binary cell {other:?} at row {row}"
        ))),
    }
}
