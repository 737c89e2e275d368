//! Synthetic production networks with known injected anomalies.
//!
//! Clean physics per well: exponential decline with multiplicative noise, a
//! logistic water-cut ramp, a smooth gas-oil ratio curve applied exactly
//! (gas = oil * curve, so ratio rules stay quiet on clean data), wellhead
//! pressure anti-correlated with a slow moving average of rate (daily
//! pressure noise stays independent of daily rate noise), and occasional
//! full-day downtime with pressures held flat.
//!
//! Anomaly kinds are separated by observable signature: theft scales only
//! metered oil (ratio and drop signals, no physical cause); inefficiency is
//! a sharp onset then a deepening decline with rising wellhead pressure;
//! sensor dropout blanks a non-rule sensor column; facility events put every
//! co-facility well into alternating-day surge cycling, which keeps trailing
//! means high enough that drop rules fire on every low day of the span while
//! the cycle phase stays readable from recent history.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{build_well_series, ColumnMap, ProductionRecord, Topology, Variable, WellSeries};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Metered oil loss: oil scaled down, gas and pressures untouched.
    Theft,
    /// Sharp onset, then a deepening production decline with rising
    /// wellhead pressure (blockage signature).
    Inefficiency,
    /// A sensor column goes missing for a span.
    SensorDropout,
    /// All co-facility wells cycle between choked-back and normal days.
    FacilityEvent,
}

impl AnomalyKind {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Theft => "theft",
            AnomalyKind::Inefficiency => "inefficiency",
            AnomalyKind::SensorDropout => "sensor_dropout",
            AnomalyKind::FacilityEvent => "facility_event",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Target fraction of all (well, day) cells covered by this kind.
    pub rate: f64,
    /// Scaling depth for production kinds; unused for sensor dropout.
    pub magnitude: f64,
    /// Event length in days, applied exactly.
    pub duration: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_fields: usize,
    pub n_facilities: usize,
    pub wells_per_facility: usize,
    pub t_days: usize,
    /// Nominal exponential decline, 1/day; jittered ±20% per well.
    pub decline_rate: f64,
    pub q0_min: f64,
    pub q0_max: f64,
    /// Coefficient of variation of daily oil noise.
    pub noise_cv: f64,
    /// Per-day probability of starting a benign downtime bout.
    pub downtime_rate: f64,
    pub anomalies: Vec<AnomalySpec>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_fields: 1,
            n_facilities: 3,
            wells_per_facility: 4,
            t_days: 540,
            decline_rate: 0.0015,
            q0_min: 800.0,
            q0_max: 3000.0,
            noise_cv: 0.05,
            downtime_rate: 0.001,
            anomalies: vec![
                AnomalySpec {
                    kind: AnomalyKind::Theft,
                    rate: 0.008,
                    magnitude: 0.65,
                    duration: 7,
                },
                AnomalySpec {
                    kind: AnomalyKind::Inefficiency,
                    rate: 0.006,
                    magnitude: 0.5,
                    duration: 10,
                },
                AnomalySpec {
                    kind: AnomalyKind::SensorDropout,
                    rate: 0.01,
                    magnitude: 0.0,
                    duration: 5,
                },
                AnomalySpec {
                    kind: AnomalyKind::FacilityEvent,
                    rate: 0.07,
                    magnitude: 0.75,
                    duration: 20,
                },
            ],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_fields", self.n_fields),
            ("n_facilities", self.n_facilities),
            ("wells_per_facility", self.wells_per_facility),
            ("t_days", self.t_days),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_facilities < self.n_fields {
            return Err(Error::Config("need at least one facility per field".into()));
        }
        if !(self.decline_rate >= 0.0) {
            return Err(Error::Config(format!("decline_rate {} negative", self.decline_rate)));
        }
        if !(self.q0_min > 0.0 && self.q0_max >= self.q0_min) {
            return Err(Error::Config(format!(
                "initial rate range [{}, {}] invalid",
                self.q0_min, self.q0_max
            )));
        }
        if !(self.noise_cv >= 0.0) {
            return Err(Error::Config(format!("noise_cv {} negative", self.noise_cv)));
        }
        if !(0.0..=1.0).contains(&self.downtime_rate) {
            return Err(Error::Config(format!("downtime_rate {} outside [0, 1]", self.downtime_rate)));
        }
        for spec in &self.anomalies {
            if !(0.0..=1.0).contains(&spec.rate) {
                return Err(Error::Config(format!(
                    "{} rate {} outside [0, 1]",
                    spec.kind.name(),
                    spec.rate
                )));
            }
            if spec.duration == 0 || spec.duration > self.t_days {
                return Err(Error::Config(format!(
                    "{} duration {} outside [1, t_days]",
                    spec.kind.name(),
                    spec.duration
                )));
            }
            let scales = !matches!(spec.kind, AnomalyKind::SensorDropout);
            if scales && !(spec.magnitude > 0.0 && spec.magnitude < 1.0) {
                return Err(Error::Config(format!(
                    "{} magnitude {} outside (0, 1)",
                    spec.kind.name(),
                    spec.magnitude
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEvent {
    /// Well id, or facility id for facility-wide events.
    pub target: String,
    pub kind: AnomalyKind,
    pub start: NaiveDate,
    /// Inclusive.
    pub end: NaiveDate,
    pub magnitude: f64,
}

/// What was actually injected, for scoring detectors against known truth.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLog {
    pub events: Vec<TruthEvent>,
    /// Per-well day mask: true where any injected event covers the day.
    pub mask: BTreeMap<String, Vec<bool>>,
}

impl GroundTruthLog {
    /// Fraction of all (well, day) cells covered by events.
    pub fn coverage(&self) -> f64 {
        let total: usize = self.mask.values().map(|m| m.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let hot: usize = self.mask.values().map(|m| m.iter().filter(|&&b| b).count()).sum();
        hot as f64 / total as f64
    }

    pub fn events_csv(&self) -> String {
        let mut out = String::from("target,kind,start,end,magnitude\n");
        for e in &self.events {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.target,
                e.kind.name(),
                e.start,
                e.end,
                e.magnitude
            ));
        }
        out
    }

    pub fn mask_csv(&self) -> String {
        let mut out = String::from("well_id,date,truth\n");
        for (well, mask) in &self.mask {
            for (t, &hot) in mask.iter().enumerate() {
                out.push_str(&format!("{well},{},{}\n", date_at(t), u8::from(hot)));
            }
        }
        out
    }
}

pub fn start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid fixed start date")
}

fn date_at(t: usize) -> NaiveDate {
    start_date() + chrono::Days::new(t as u64)
}

const WELL_SALT: u64 = 0x77656c6c;
const EVENT_SALT: u64 = 0x65766e74;

/// Clean network: topology plus per-well series with no injected anomalies.
pub fn generate_clean(cfg: &SynthConfig) -> Result<(Topology, BTreeMap<String, WellSeries>)> {
    cfg.validate()?;
    let mut well_facility = BTreeMap::new();
    let mut facility_field = BTreeMap::new();
    for f in 0..cfg.n_facilities {
        let facility = format!("FAC{:02}", f + 1);
        let field = format!("FIELD{:02}", f % cfg.n_fields + 1);
        facility_field.insert(facility.clone(), field);
        for w in 0..cfg.wells_per_facility {
            well_facility.insert(format!("{facility}-W{:02}", w + 1), facility.clone());
        }
    }
    let topology = Topology { well_facility, facility_field };

    let mut records = Vec::new();
    for (idx, well) in topology.well_facility.keys().enumerate() {
        let mut rng = SplitMix64::new(derive_seed(cfg.seed, WELL_SALT.wrapping_add(idx as u64)));
        records.extend(synth_well(well, &mut rng, cfg));
    }
    let series = build_well_series(records, &topology)?;
    Ok((topology, series))
}

fn synth_well(well_id: &str, rng: &mut SplitMix64, cfg: &SynthConfig) -> Vec<ProductionRecord> {
    let q0 = rng.range_f64(cfg.q0_min, cfg.q0_max);
    let decline = cfg.decline_rate * rng.range_f64(0.8, 1.2);
    let gor0 = rng.range_f64(80.0, 120.0);
    // linear, not periodic: curve extrema collapse the trailing std of the
    // ratio and trip 3-sigma deviation checks on perfectly clean data
    let gor_slope = rng.range_f64(1.5e-4, 2.5e-4);
    let wc_max = rng.range_f64(0.3, 0.7);
    let breakthrough = rng.range_f64(0.3, 0.7) * cfg.t_days as f64;
    let wc_scale = (cfg.t_days as f64 / 20.0).max(1.0);
    let p_base = rng.range_f64(28.0, 35.0);
    let mut choke = rng.range_f64(30.0, 60.0);

    // slow drawdown proxy: pressure responds to the rate trend, not to
    // daily noise, so daily rate and pressure moves stay independent
    let mut rate_trend = q0;
    let mut prev_whp = p_base - 6.0;
    let mut prev_dhp = 180.0 + 2.2 * prev_whp;
    let mut downtime_left = 0usize;

    let mut out = Vec::with_capacity(cfg.t_days);
    for t in 0..cfg.t_days {
        let base = q0 * (-decline * t as f64).exp();
        let noise = if cfg.noise_cv > 0.0 { rng.normal(0.0, cfg.noise_cv) } else { 0.0 };
        let oil = (base * (1.0 + noise)).max(0.0);
        let gor = gor0 * (1.0 + gor_slope * t as f64);
        let wc = wc_max / (1.0 + (-(t as f64 - breakthrough) / wc_scale).exp());
        rate_trend = 0.05 * oil + 0.95 * rate_trend;
        let whp = p_base - 6.0 * (rate_trend / q0) + rng.normal(0.0, 0.3);
        let dhp = 180.0 + 2.2 * whp + rng.normal(0.0, 0.4);
        let wht = 82.0 + 4.0 * (t as f64 * std::f64::consts::TAU / 365.0).sin()
            + rng.normal(0.0, 0.3);
        if rng.chance(1.0 / 90.0) {
            choke = rng.range_f64(30.0, 60.0);
        }
        if downtime_left == 0 && rng.chance(cfg.downtime_rate) {
            downtime_left = 1 + rng.next_below(2);
        }

        let mut r = ProductionRecord::empty(date_at(t), well_id);
        if downtime_left > 0 {
            downtime_left -= 1;
            r.oil_vol = Some(0.0);
            r.gas_vol = Some(0.0);
            r.water_vol = Some(0.0);
            r.on_stream_hrs = Some(0.0);
            // shut-in: transmitters keep reporting the held pressures
            r.wellhead_pressure = Some(prev_whp);
            r.downhole_pressure = Some(prev_dhp);
            r.wellhead_temp = Some(wht);
            r.choke_size = Some(0.0);
        } else {
            r.oil_vol = Some(oil);
            r.gas_vol = Some(oil * gor);
            r.water_vol = Some(oil * wc / (1.0 - wc));
            r.on_stream_hrs = Some(24.0);
            r.wellhead_pressure = Some(whp);
            r.downhole_pressure = Some(dhp);
            r.wellhead_temp = Some(wht);
            r.choke_size = Some(choke);
            prev_whp = whp;
            prev_dhp = dhp;
        }
        out.push(r);
    }
    out
}

/// Mutate clean series in place, injecting every configured anomaly kind.
/// Events never overlap on a well; each event is logged exactly once.
pub fn inject_anomalies(
    series: &mut BTreeMap<String, WellSeries>,
    cfg: &SynthConfig,
    topology: &Topology,
) -> Result<GroundTruthLog> {
    cfg.validate()?;
    let wells: Vec<String> = series.keys().cloned().collect();
    let n_wells = wells.len();
    let t_days = series.values().next().map_or(0, |s| s.records.len());
    let facilities: Vec<String> = topology.facility_field.keys().cloned().collect();

    let mut occupied: BTreeMap<&str, Vec<bool>> =
        wells.iter().map(|w| (w.as_str(), vec![false; t_days])).collect();
    let mut mask: BTreeMap<String, Vec<bool>> =
        wells.iter().map(|w| (w.clone(), vec![false; t_days])).collect();
    let mut events = Vec::new();
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, EVENT_SALT));

    for spec in &cfg.anomalies {
        let wells_per_event = match spec.kind {
            AnomalyKind::FacilityEvent => cfg.wells_per_facility,
            _ => 1,
        };
        let cells = spec.rate * (n_wells * t_days) as f64;
        let n_events = (cells / (spec.duration * wells_per_event) as f64).round() as usize;
        // events on a well cluster in time: a follow-up of the same kind
        // lands shortly after the previous one when the space is free,
        // which makes onsets partially predictable from recent history
        let mut follow: Option<(String, usize)> = None;
        // a fixed share of fresh draws is confined to the last 30% of days,
        // so a time split always sees a higher anomaly rate in its test
        // period than in its train period
        let late_from = (t_days as f64 * 0.7) as usize;
        let n_late = (n_events as f64 * 0.46).round() as usize;
        for i in 0..n_events {
            let mut placed = false;
            for _attempt in 0..200 {
                let (target, start) = match follow.take() {
                    Some((target, after)) => {
                        let start = after + 3 + rng.next_below(5);
                        (target, start)
                    }
                    None => {
                        let target = match spec.kind {
                            AnomalyKind::FacilityEvent => {
                                facilities[rng.next_below(facilities.len())].clone()
                            }
                            _ => wells[rng.next_below(n_wells)].clone(),
                        };
                        let span = t_days.saturating_sub(spec.duration) + 1;
                        let start = if i < n_late && late_from < span {
                            late_from + rng.next_below(span - late_from)
                        } else {
                            rng.next_below(span)
                        };
                        (target, start)
                    }
                };
                if start + spec.duration > t_days {
                    continue;
                }
                let members: Vec<&str> = match spec.kind {
                    AnomalyKind::FacilityEvent => topology
                        .well_facility
                        .iter()
                        .filter(|(_, f)| **f == target)
                        .map(|(w, _)| w.as_str())
                        .collect(),
                    _ => vec![target.as_str()],
                };
                let free = members.iter().all(|w| {
                    occupied[w][start..start + spec.duration].iter().all(|&b| !b)
                });
                if !free {
                    continue;
                }
                for w in &members {
                    for slot in &mut occupied.get_mut(*w).expect("known well")
                        [start..start + spec.duration]
                    {
                        *slot = true;
                    }
                    for slot in
                        &mut mask.get_mut(*w).expect("known well")[start..start + spec.duration]
                    {
                        *slot = true;
                    }
                    apply_event(
                        series.get_mut(*w).expect("known well"),
                        spec,
                        start,
                        &mut rng,
                    );
                }
                events.push(TruthEvent {
                    target: target.clone(),
                    kind: spec.kind,
                    start: date_at(start),
                    end: date_at(start + spec.duration - 1),
                    magnitude: spec.magnitude,
                });
                if rng.chance(0.6) {
                    follow = Some((target, start + spec.duration));
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Validation(format!(
                    "could not place a {} event after 200 draws; \
                     lower its rate or duration",
                    spec.kind.name()
                )));
            }
        }
    }
    Ok(GroundTruthLog { events, mask })
}

fn apply_event(series: &mut WellSeries, spec: &AnomalySpec, start: usize, rng: &mut SplitMix64) {
    let d = spec.duration;
    match spec.kind {
        AnomalyKind::Theft => {
            // metered oil loss only: the ratio against untouched gas rises
            for r in &mut series.records[start..start + d] {
                r.oil_vol = r.oil_vol.map(|v| v * (1.0 - spec.magnitude));
            }
        }
        AnomalyKind::Inefficiency => {
            for (k, r) in series.records[start..start + d].iter_mut().enumerate() {
                // sharp onset, then a ramp deepening to full magnitude
                let depth = if k == 0 {
                    0.4 * spec.magnitude
                } else {
                    spec.magnitude * (0.4 + 0.6 * k as f64 / (d - 1).max(1) as f64)
                };
                let scale = 1.0 - depth;
                r.oil_vol = r.oil_vol.map(|v| v * scale);
                r.gas_vol = r.gas_vol.map(|v| v * scale);
                // backpressure builds as the blockage develops
                let bump = 2.0 + 4.0 * spec.magnitude * k as f64 / (d - 1).max(1) as f64;
                r.wellhead_pressure = r.wellhead_pressure.map(|v| v + bump);
            }
        }
        AnomalyKind::SensorDropout => {
            let victims =
                [Variable::DownholePressure, Variable::WellheadTemp, Variable::ChokeSize];
            let var = victims[rng.next_below(victims.len())];
            for r in &mut series.records[start..start + d] {
                r.set(var, None);
            }
        }
        AnomalyKind::FacilityEvent => {
            // surge cycling: two choked-back days, two recovery days,
            // repeating; the recovery days prop up trailing means so the
            // choked days keep tripping drop rules for the whole span
            for (k, r) in series.records[start..start + d].iter_mut().enumerate() {
                if k % 4 < 2 {
                    let scale = 1.0 - spec.magnitude;
                    r.oil_vol = r.oil_vol.map(|v| v * scale);
                    r.gas_vol = r.gas_vol.map(|v| v * scale);
                    r.water_vol = r.water_vol.map(|v| v * scale);
                }
            }
        }
    }
}

/// Clean generation plus anomaly injection in one call.
pub fn generate(
    cfg: &SynthConfig,
) -> Result<(Topology, BTreeMap<String, WellSeries>, GroundTruthLog)> {
    let (topology, mut series) = generate_clean(cfg)?;
    let truth = inject_anomalies(&mut series, cfg, &topology)?;
    Ok((topology, series, truth))
}

/// Production table in the exact ingestion schema; missing cells stay empty.
pub fn export_production_table(series: &BTreeMap<String, WellSeries>) -> String {
    let map = ColumnMap::default();
    let mut columns: Vec<(&str, Variable)> = Vec::new();
    for var in Variable::ALL {
        if let Some(name) = map.source(var) {
            columns.push((name, var));
        }
    }
    let mut out = String::new();
    out.push_str(&map.date);
    out.push(',');
    out.push_str(&map.well);
    for (name, _) in &columns {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for s in series.values() {
        for r in &s.records {
            out.push_str(&format!("{},{}", r.date, r.well_id));
            for (_, var) in &columns {
                out.push(',');
                if let Some(v) = r.get(*var) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Topology table in the three-column layout the graph builder reads.
pub fn export_topology_table(topology: &Topology) -> String {
    let mut out = String::from("well_id,facility_id,field_id\n");
    for (well, facility) in &topology.well_facility {
        let field = &topology.facility_field[facility];
        out.push_str(&format!("{well},{facility},{field}\n"));
    }
    out
}
