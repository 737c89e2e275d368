//! Artifact store: atomic writes, content hashes, and the run manifest.
//!
//! Every stage writes through a [`StageWriter`], which records the SHA-256
//! of each input it read and each output it produced. The accumulated
//! records form the manifest (one JSON document per run directory), so any
//! artifact can be traced to the exact inputs and configuration that made
//! it. Writes go to a temp file in the target directory followed by a
//! rename: an interrupted run leaves either the old artifact or the new
//! one, never a truncated file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

/// Atomically replace `path` with `content`. Parent directories are created
/// as needed; the temp file lives in the same directory so the rename never
/// crosses filesystems.
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent)
        .map_err(|e| Error::io(&format!("create {}", parent.display()), e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Artifact(format!("{} has no file name", path.display())))?;
    let tmp = parent.join(format!("{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, content).map_err(|e| Error::io(&format!("write {}", tmp.display()), e))?;
    fs::rename(&tmp, path)
        .map_err(|e| Error::io(&format!("rename {} into place", tmp.display()), e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(&format!("read {}", path.display()), e))
}

/// Everything one stage consumed and produced, keyed by path. Input paths
/// are recorded as given; output paths are relative to the run directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_fingerprint: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Per-run ledger of stage records, stored as `manifest.json` in the run
/// directory. Deliberately timestamp-free: re-running a stage on unchanged
/// inputs reproduces the manifest byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    /// Load the manifest from a run directory; a fresh directory yields an
    /// empty manifest.
    pub fn load(run_dir: &Path) -> Result<Manifest> {
        let path = run_dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = read_text(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::serde("manifest", e))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::serde("manifest", e))?;
        write_atomic(&run_dir.join(MANIFEST_NAME), text.as_bytes())
    }
}

/// Tracks one stage's reads and writes, then commits them to the manifest.
pub struct StageWriter<'a> {
    run_dir: &'a Path,
    stage: &'a str,
    record: StageRecord,
}

impl<'a> StageWriter<'a> {
    pub fn new(run_dir: &'a Path, stage: &'a str, config_fingerprint: String, seed: u64) -> Self {
        StageWriter {
            run_dir,
            stage,
            record: StageRecord { config_fingerprint, seed, ..StageRecord::default() },
        }
    }

    /// Read an input another stage should have produced. A missing file is
    /// reported as "run `<produced_by>` first" rather than a bare IO error.
    pub fn read_input(&mut self, path: &Path, produced_by: &str) -> Result<String> {
        if !path.exists() {
            return Err(Error::Artifact(format!(
                "{} stage input {} is missing; run the `{}` stage first",
                self.stage,
                path.display(),
                produced_by
            )));
        }
        let text = read_text(path)?;
        self.record.inputs.insert(path.display().to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    /// Record an input that was already in memory (e.g. handed over by the
    /// previous stage in the same process).
    pub fn note_input(&mut self, name: &str, content: &str) {
        self.record.inputs.insert(name.to_string(), sha256_hex(content.as_bytes()));
    }

    /// Atomically write one output under the run directory and record its
    /// hash. `rel` is a run-dir-relative path like "data/production.csv".
    pub fn write(&mut self, rel: &str, content: &str) -> Result<PathBuf> {
        let path = self.run_dir.join(rel);
        write_atomic(&path, content.as_bytes())?;
        self.record.outputs.insert(rel.to_string(), sha256_hex(content.as_bytes()));
        Ok(path)
    }

    pub fn outputs(&self) -> &BTreeMap<String, String> {
        &self.record.outputs
    }

    /// Fold this stage's record into the manifest and persist it.
    pub fn commit(self, manifest: &mut Manifest) -> Result<()> {
        manifest.stages.insert(self.stage.to_string(), self.record);
        manifest.save(self.run_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_creates_dirs_replaces_content_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/out.txt");
        write_atomic(&path, b"first").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "first");
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        let names: Vec<String> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["out.txt"]);
    }

    #[test]
    fn missing_stage_input_names_the_stage_to_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = StageWriter::new(dir.path(), "featurize", "f".into(), 0);
        let err = w.read_input(&dir.path().join("data/production.csv"), "synth").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run the `synth` stage"), "{msg}");
        assert!(msg.contains("production.csv"), "{msg}");
    }

    #[test]
    fn manifest_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = Manifest::default();

        let mut w = StageWriter::new(dir.path(), "synth", "fp0".into(), 7);
        w.write("data/production.csv", "date,well\n").unwrap();
        w.commit(&mut manifest).unwrap();

        let mut w = StageWriter::new(dir.path(), "featurize", "fp0".into(), 7);
        let text = w.read_input(&dir.path().join("data/production.csv"), "synth").unwrap();
        w.write("features/W1.csv", &text).unwrap();
        w.commit(&mut manifest).unwrap();

        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        assert_eq!(loaded.stages.len(), 2);
        let feat = &loaded.stages["featurize"];
        // the recorded input hash is the synth stage's output hash
        let synth_out = &loaded.stages["synth"].outputs["data/production.csv"];
        assert_eq!(feat.inputs.values().next().unwrap(), synth_out);

        // byte-identical on rewrite
        let bytes_a = fs::read(dir.path().join(MANIFEST_NAME)).unwrap();
        manifest.save(dir.path()).unwrap();
        let bytes_b = fs::read(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn output_hashes_match_content() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = StageWriter::new(dir.path(), "label", "fp".into(), 1);
        w.write("labels/W1.csv", "date,y\n").unwrap();
        assert_eq!(w.outputs()["labels/W1.csv"], sha256_hex(b"date,y\n"));
    }

    #[test]
    fn fresh_directory_loads_an_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Manifest::load(dir.path()).unwrap().stages.is_empty());
    }
}
