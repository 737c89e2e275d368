//! One configuration file drives every pipeline stage.
//!
//! The file is RON: nested named sections mirroring the owning modules, all
//! keys optional with documented defaults, unknown keys rejected with the
//! offending key named. A run is identified by the SHA-256 fingerprint of
//! the canonical serialization, so artifacts can be traced back to the exact
//! configuration that produced them.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::graph::GraphConfig;
use crate::ingest::{ColumnMap, ImputePolicy};
use crate::labels::RuleConfig;
use crate::model::{ModelConfig, ModelKind};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Input locations and the artifact root.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Production table. Defaults to the synth stage output under `out_dir`.
    pub data: Option<String>,
    /// Topology table. Same default as `data`.
    pub topology: Option<String>,
    pub out_dir: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data: None, topology: None, out_dir: "wellwatch_out".into() }
    }
}

/// How windows are assigned to train and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitChoice {
    /// Seeded shuffle, `ratio` of windows to train.
    Random { ratio: f64, seed: u64 },
    /// Train strictly before the date, test at or after it.
    TimeCutoff { cutoff: NaiveDate },
    /// Earliest cutoff date that puts at least `frac` of windows in train.
    TimeFraction { frac: f64 },
}

impl Default for SplitChoice {
    fn default() -> Self {
        SplitChoice::TimeFraction { frac: 0.7 }
    }
}

impl SplitChoice {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SplitChoice::Random { ratio, .. } if !(ratio > 0.0 && ratio < 1.0) => Err(
                Error::Config(format!("split.ratio {ratio} outside (0, 1)")),
            ),
            SplitChoice::TimeFraction { frac } if !(frac > 0.0 && frac < 1.0) => {
                Err(Error::Config(format!("split.frac {frac} outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// Coarse family name used in reports: "random" or "time".
    pub fn kind_name(&self) -> &'static str {
        match self {
            SplitChoice::Random { .. } => "random",
            SplitChoice::TimeCutoff { .. } | SplitChoice::TimeFraction { .. } => "time",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub columns: ColumnMap,
    pub impute: ImputePolicy,
    pub features: FeatureConfig,
    pub rules: RuleConfig,
    /// Causal window length: each sample carries the `window` rows before t.
    pub window: usize,
    pub split: SplitChoice,
    pub model_kind: ModelKind,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    /// Present when the data is generated rather than supplied.
    pub synth: Option<SynthConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            paths: Paths::default(),
            columns: ColumnMap::default(),
            impute: ImputePolicy::default(),
            features: FeatureConfig::default(),
            rules: RuleConfig::default(),
            window: 14,
            split: SplitChoice::default(),
            model_kind: ModelKind::TemporalGat,
            model: ModelConfig::default(),
            graph: GraphConfig::default(),
            train: TrainConfig::default(),
            synth: Some(SynthConfig::default()),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        self.impute.validate()?;
        self.features.validate()?;
        self.rules.validate()?;
        self.split.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if let Some(synth) = &self.synth {
            synth.validate()?;
        }
        if self.model_kind.uses_graph()
            && self.paths.topology.is_none()
            && self.synth.is_none()
        {
            return Err(Error::Config(format!(
                "model_kind {} needs a topology: set paths.topology or add a synth section",
                self.model_kind
            )));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.out_dir)
    }

    /// Production table location: explicit path, else the synth output.
    pub fn data_path(&self) -> PathBuf {
        match &self.paths.data {
            Some(p) => PathBuf::from(p),
            None => self.out_dir().join("data").join("production.csv"),
        }
    }

    pub fn topology_path(&self) -> PathBuf {
        match &self.paths.topology {
            Some(p) => PathBuf::from(p),
            None => self.out_dir().join("data").join("topology.csv"),
        }
    }

    /// Canonical text form; also the fingerprint input.
    pub fn to_ron_string(&self) -> Result<String> {
        ron::ser::to_string_pretty(self, ron::ser::PrettyConfig::default())
            .map_err(|e| Error::serde("run config", e))
    }

    /// SHA-256 of the canonical serialization, hex-encoded. Any semantic
    /// change to the configuration changes the fingerprint.
    pub fn fingerprint(&self) -> Result<String> {
        let canonical =
            ron::to_string(self).map_err(|e| Error::serde("run config", e))?;
        let mut hasher = Sha256::new();
        hasher.update(b"wellwatch-runconfig-v1:");
        hasher.update(canonical.as_bytes());
        Ok(hex_digest(hasher))
    }

    pub fn from_ron_str(text: &str) -> Result<RunConfig> {
        // implicit_some lets hand-written configs say `data: "x.csv"` for
        // optional fields; explicit Some(..) still parses.
        let options = ron::Options::default()
            .with_default_extension(ron::extensions::Extensions::IMPLICIT_SOME);
        let cfg: RunConfig = options
            .from_str(text)
            .map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(&format!("run config {}", path.display()), e))?;
        Self::from_ron_str(&text)
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// SHA-256 of a byte string, hex-encoded. Used for artifact manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_digest(hasher)
}
