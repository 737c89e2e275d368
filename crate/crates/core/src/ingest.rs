//! Parsing and cleaning of daily production tables.
//!
//! Input is a delimited text table (comma or semicolon, auto-detected), one
//! row per well-day, with a configurable column mapping whose defaults match
//! Volve daily-production headers. Parsing yields [`ProductionRecord`]s with
//! explicit per-variable presence; [`build_well_series`] groups and orders
//! them per well; [`impute_series`] applies the engineering-aware imputation
//! policy and is idempotent.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The raw daily variables carried through the pipeline, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    OilVol,
    GasVol,
    WaterVol,
    OnStreamHrs,
    DownholePressure,
    WellheadPressure,
    WellheadTemp,
    ChokeSize,
}

impl Variable {
    pub const ALL: [Variable; 8] = [
        Variable::OilVol,
        Variable::GasVol,
        Variable::WaterVol,
        Variable::OnStreamHrs,
        Variable::DownholePressure,
        Variable::WellheadPressure,
        Variable::WellheadTemp,
        Variable::ChokeSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variable::OilVol => "oil_vol",
            Variable::GasVol => "gas_vol",
            Variable::WaterVol => "water_vol",
            Variable::OnStreamHrs => "on_stream_hrs",
            Variable::DownholePressure => "downhole_pressure",
            Variable::WellheadPressure => "wellhead_pressure",
            Variable::WellheadTemp => "wellhead_temp",
            Variable::ChokeSize => "choke_size",
        }
    }

    /// Produced volumes: zeroed during confirmed downtime, never
    /// forward-filled (a copied volume would fabricate production).
    pub fn is_volume(self) -> bool {
        matches!(self, Variable::OilVol | Variable::GasVol | Variable::WaterVol)
    }

    /// Gauge readings: forward-fillable within a short horizon because the
    /// physical quantity persists between samples.
    pub fn is_sensor(self) -> bool {
        matches!(
            self,
            Variable::DownholePressure
                | Variable::WellheadPressure
                | Variable::WellheadTemp
                | Variable::ChokeSize
        )
    }
}

impl std::fmt::Display for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One well-day. `None` means the cell was absent from the source table.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductionRecord {
    pub date: NaiveDate,
    pub well_id: String,
    pub oil_vol: Option<f64>,
    pub gas_vol: Option<f64>,
    pub water_vol: Option<f64>,
    pub on_stream_hrs: Option<f64>,
    pub downhole_pressure: Option<f64>,
    pub wellhead_pressure: Option<f64>,
    pub wellhead_temp: Option<f64>,
    pub choke_size: Option<f64>,
}

impl ProductionRecord {
    pub fn empty(date: NaiveDate, well_id: impl Into<String>) -> Self {
        ProductionRecord {
            date,
            well_id: well_id.into(),
            oil_vol: None,
            gas_vol: None,
            water_vol: None,
            on_stream_hrs: None,
            downhole_pressure: None,
            wellhead_pressure: None,
            wellhead_temp: None,
            choke_size: None,
        }
    }

    pub fn get(&self, var: Variable) -> Option<f64> {
        match var {
            Variable::OilVol => self.oil_vol,
            Variable::GasVol => self.gas_vol,
            Variable::WaterVol => self.water_vol,
            Variable::OnStreamHrs => self.on_stream_hrs,
            Variable::DownholePressure => self.downhole_pressure,
            Variable::WellheadPressure => self.wellhead_pressure,
            Variable::WellheadTemp => self.wellhead_temp,
            Variable::ChokeSize => self.choke_size,
        }
    }

    pub fn set(&mut self, var: Variable, value: Option<f64>) {
        let slot = match var {
            Variable::OilVol => &mut self.oil_vol,
            Variable::GasVol => &mut self.gas_vol,
            Variable::WaterVol => &mut self.water_vol,
            Variable::OnStreamHrs => &mut self.on_stream_hrs,
            Variable::DownholePressure => &mut self.downhole_pressure,
            Variable::WellheadPressure => &mut self.wellhead_pressure,
            Variable::WellheadTemp => &mut self.wellhead_temp,
            Variable::ChokeSize => &mut self.choke_size,
        };
        *slot = value;
    }
}

/// Source-column names for each logical variable. Date and well are
/// required; a variable mapped to `None` is treated as never observed.
/// Defaults follow the Volve daily production sheet.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub date: String,
    pub well: String,
    pub date_format: String,
    pub oil_vol: Option<String>,
    pub gas_vol: Option<String>,
    pub water_vol: Option<String>,
    pub on_stream_hrs: Option<String>,
    pub downhole_pressure: Option<String>,
    pub wellhead_pressure: Option<String>,
    pub wellhead_temp: Option<String>,
    pub choke_size: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            date: "DATEPRD".into(),
            well: "NPD_WELL_BORE_NAME".into(),
            date_format: "%Y-%m-%d".into(),
            oil_vol: Some("BORE_OIL_VOL".into()),
            gas_vol: Some("BORE_GAS_VOL".into()),
            water_vol: Some("BORE_WAT_VOL".into()),
            on_stream_hrs: Some("ON_STREAM_HRS".into()),
            downhole_pressure: Some("AVG_DOWNHOLE_PRESSURE".into()),
            wellhead_pressure: Some("AVG_WHP_P".into()),
            wellhead_temp: Some("AVG_WHT_P".into()),
            choke_size: Some("AVG_CHOKE_SIZE_P".into()),
        }
    }
}

impl ColumnMap {
    pub(crate) fn source(&self, var: Variable) -> Option<&str> {
        match var {
            Variable::OilVol => self.oil_vol.as_deref(),
            Variable::GasVol => self.gas_vol.as_deref(),
            Variable::WaterVol => self.water_vol.as_deref(),
            Variable::OnStreamHrs => self.on_stream_hrs.as_deref(),
            Variable::DownholePressure => self.downhole_pressure.as_deref(),
            Variable::WellheadPressure => self.wellhead_pressure.as_deref(),
            Variable::WellheadTemp => self.wellhead_temp.as_deref(),
            Variable::ChokeSize => self.choke_size.as_deref(),
        }
    }
}

/// Well -> facility -> field relationships.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    /// well id -> facility id
    pub well_facility: BTreeMap<String, String>,
    /// facility id -> field id
    pub facility_field: BTreeMap<String, String>,
}

impl Topology {
    /// Every facility referenced by a well must itself map to a field.
    pub fn validate(&self) -> Result<()> {
        for (well, facility) in &self.well_facility {
            if !self.facility_field.contains_key(facility) {
                return Err(Error::Topology(format!(
                    "well {well:?} references facility {facility:?} which maps to no field"
                )));
            }
        }
        Ok(())
    }

    pub fn facility_of(&self, well: &str) -> Result<&str> {
        self.well_facility
            .get(well)
            .map(String::as_str)
            .ok_or_else(|| Error::Topology(format!("well {well:?} absent from topology")))
    }

    pub fn field_of_facility(&self, facility: &str) -> Result<&str> {
        self.facility_field
            .get(facility)
            .map(String::as_str)
            .ok_or_else(|| Error::Topology(format!("facility {facility:?} absent from topology")))
    }
}

/// Chronological per-well history plus missingness indicator columns.
/// Indicator columns are added by [`impute_series`]; 1 marks a step whose
/// value did not come from an observation.
#[derive(Debug, Clone, PartialEq)]
pub struct WellSeries {
    pub well_id: String,
    pub facility_id: String,
    pub field_id: String,
    pub records: Vec<ProductionRecord>,
    pub indicators: BTreeMap<Variable, Vec<bool>>,
}

impl WellSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn column(&self, var: Variable) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.get(var)).collect()
    }
}

// ----------------------------------------------------------------------
// parsing
// ----------------------------------------------------------------------

/// Pick the delimiter by counting candidates in the header line.
pub(crate) fn sniff_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    let commas = header.matches(',').count();
    let semis = header.matches(';').count();
    if semis > commas {
        b';'
    } else {
        b','
    }
}

/// Parse a delimited production table into records, one per input row, row
/// order preserved. See [`ColumnMap`] for the schema contract.
pub fn parse_production_table(text: &str, map: &ColumnMap) -> Result<Vec<ProductionRecord>> {
    parse_inner(text, map, Path::new("<inline>"))
}

/// [`parse_production_table`] over a file on disk; errors carry the path.
pub fn parse_production_file(path: &Path, map: &ColumnMap) -> Result<Vec<ProductionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_inner(&text, map, path)
}

fn parse_inner(text: &str, map: &ColumnMap, path: &Path) -> Result<Vec<ProductionRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(text))
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(text.as_bytes());

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::serde(path, e))?
        .iter()
        .map(|h| h.trim_start_matches('\u{feff}').to_string())
        .collect();

    let col_index = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
            header: headers.clone(),
        })
    };

    let date_idx = col_index(&map.date)?;
    let well_idx = col_index(&map.well)?;
    let mut var_idx: Vec<(Variable, usize)> = Vec::new();
    for var in Variable::ALL {
        if let Some(source) = map.source(var) {
            var_idx.push((var, col_index(source)?));
        }
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1; // 1-based data row, header excluded
        let row = row.map_err(|e| Error::serde(path, format!("row {row_no}: {e}")))?;
        let cell = |idx: usize| row.get(idx).unwrap_or("");

        let date_text = cell(date_idx);
        let date =
            NaiveDate::parse_from_str(date_text, &map.date_format).map_err(|_| Error::BadCell {
                path: path.to_path_buf(),
                row: row_no,
                column: map.date.clone(),
                value: date_text.to_string(),
                expected: "date",
            })?;

        let well_id = cell(well_idx).to_string();
        if well_id.is_empty() {
            return Err(Error::BadCell {
                path: path.to_path_buf(),
                row: row_no,
                column: map.well.clone(),
                value: String::new(),
                expected: "well identifier",
            });
        }

        let mut record = ProductionRecord::empty(date, well_id);
        for &(var, idx) in &var_idx {
            let raw = cell(idx);
            if raw.is_empty() {
                continue;
            }
            let value: f64 = raw.parse().map_err(|_| Error::BadCell {
                path: path.to_path_buf(),
                row: row_no,
                column: headers[idx].clone(),
                value: raw.to_string(),
                expected: "number",
            })?;
            if !value.is_finite() {
                return Err(Error::BadCell {
                    path: path.to_path_buf(),
                    row: row_no,
                    column: headers[idx].clone(),
                    value: raw.to_string(),
                    expected: "finite number",
                });
            }
            record.set(var, Some(value));
        }

        validate_record(&record, path, row_no)?;
        records.push(record);
    }

    if records.is_empty() {
        return Err(Error::Validation(format!("{}: table has no data rows", path.display())));
    }
    Ok(records)
}

fn validate_record(record: &ProductionRecord, path: &Path, row: usize) -> Result<()> {
    if let Some(hrs) = record.on_stream_hrs {
        if !(0.0..=24.0).contains(&hrs) {
            return Err(Error::Validation(format!(
                "{}:{row}: on-stream hours {hrs} outside [0, 24] for well {:?}",
                path.display(),
                record.well_id
            )));
        }
    }
    for var in [Variable::OilVol, Variable::GasVol, Variable::WaterVol] {
        if let Some(v) = record.get(var) {
            if v < 0.0 {
                return Err(Error::Validation(format!(
                    "{}:{row}: negative {var} ({v}) for well {:?}",
                    path.display(),
                    record.well_id
                )));
            }
        }
    }
    Ok(())
}

// ----------------------------------------------------------------------
// series assembly
// ----------------------------------------------------------------------

/// Group records per well, sort chronologically, and attach topology ids.
/// Duplicate (well, date) pairs and wells missing from the topology are
/// errors; an empty record list yields an empty map.
pub fn build_well_series(
    records: Vec<ProductionRecord>,
    topology: &Topology,
) -> Result<BTreeMap<String, WellSeries>> {
    topology.validate()?;
    let mut grouped: BTreeMap<String, Vec<ProductionRecord>> = BTreeMap::new();
    for record in records {
        grouped.entry(record.well_id.clone()).or_default().push(record);
    }

    let mut out = BTreeMap::new();
    for (well_id, mut records) in grouped {
        let facility_id = topology.facility_of(&well_id)?.to_string();
        let field_id = topology.field_of_facility(&facility_id)?.to_string();
        records.sort_by_key(|r| r.date);
        for pair in records.windows(2) {
            if pair[0].date == pair[1].date {
                return Err(Error::DuplicateRecord { well: well_id, date: pair[0].date });
            }
        }
        out.insert(
            well_id.clone(),
            WellSeries { well_id, facility_id, field_id, records, indicators: BTreeMap::new() },
        );
    }
    Ok(out)
}

// ----------------------------------------------------------------------
// imputation
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputePolicy {
    /// Maximum consecutive steps a sensor gap is forward-filled.
    pub ffill_horizon: usize,
    /// Variables missing more often than this gain an indicator column.
    pub persistent_missing_frac: f64,
}

impl Default for ImputePolicy {
    fn default() -> Self {
        ImputePolicy { ffill_horizon: 3, persistent_missing_frac: 0.20 }
    }
}

impl ImputePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.persistent_missing_frac) {
            return Err(Error::Config(format!(
                "persistent_missing_frac {} outside [0, 1]",
                self.persistent_missing_frac
            )));
        }
        Ok(())
    }
}

/// Fill gaps so every variable is a finite number, without fabricating
/// signal:
///
/// 1. volumes missing while on_stream_hrs == 0 become observed zeros
///    (confirmed non-production, not sensor absence; no indicator),
/// 2. variables still missing more than `persistent_missing_frac` of steps
///    get an indicator column marking exactly those steps, including steps a
///    later fill will cover (a filled value is a stale copy, not a reading),
/// 3. sensor gaps are forward-filled for at most `ffill_horizon` consecutive
///    steps after the last observation,
/// 4. anything still missing becomes 0 with an indicator 1.
///
/// The function is idempotent: its output has no missing cells, and existing
/// indicator columns pass through by union, so a second application is the
/// identity.
pub fn impute_series(mut series: WellSeries, policy: &ImputePolicy) -> WellSeries {
    let n = series.len();
    if n == 0 {
        return series;
    }

    // 1. confirmed downtime: missing volumes are true zeros
    for record in &mut series.records {
        if record.on_stream_hrs == Some(0.0) {
            for var in Variable::ALL.into_iter().filter(|v| v.is_volume()) {
                if record.get(var).is_none() {
                    record.set(var, Some(0.0));
                }
            }
        }
    }

    for var in Variable::ALL {
        let missing: Vec<bool> = series.records.iter().map(|r| r.get(var).is_none()).collect();
        let missing_count = missing.iter().filter(|&&m| m).count();
        if missing_count == 0 {
            continue;
        }

        // 2. persistent missingness earns an indicator for every missing step
        let frac = missing_count as f64 / n as f64;
        if frac > policy.persistent_missing_frac {
            merge_indicator(&mut series.indicators, var, &missing, n);
        }

        // 3. forward fill bounded sensor gaps
        if var.is_sensor() {
            let mut last_observed: Option<f64> = None;
            let mut filled_run = 0usize;
            for t in 0..n {
                if !missing[t] {
                    last_observed = series.records[t].get(var);
                    filled_run = 0;
                } else if let Some(v) = last_observed {
                    if filled_run < policy.ffill_horizon {
                        series.records[t].set(var, Some(v));
                        filled_run += 1;
                    }
                }
            }
        }

        // 4. residuals: zero with indicator
        let residual: Vec<bool> =
            series.records.iter().map(|r| r.get(var).is_none()).collect();
        if residual.iter().any(|&m| m) {
            merge_indicator(&mut series.indicators, var, &residual, n);
            for (t, record) in series.records.iter_mut().enumerate() {
                if residual[t] {
                    record.set(var, Some(0.0));
                }
            }
        }
    }
    series
}

fn merge_indicator(
    indicators: &mut BTreeMap<Variable, Vec<bool>>,
    var: Variable,
    mask: &[bool],
    n: usize,
) {
    let column = indicators.entry(var).or_insert_with(|| vec![false; n]);
    for (slot, &m) in column.iter_mut().zip(mask) {
        *slot = *slot || m;
    }
}
