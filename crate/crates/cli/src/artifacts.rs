//! Work-directory layout, checksummed writes and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const COHORT: &str = "cohort.jsonl";
pub const SPLITS: &str = "splits.json";
pub const VOCAB: &str = "vocab.tsv";
pub const SEQUENCES: &str = "sequences.jsonl";
pub const FEATURIZER: &str = "featurizer.json";
pub const ROUTER: &str = "router.json";
pub const THRESHOLDS: &str = "thresholds.json";
pub const FRONTIER: &str = "frontier.csv";
pub const SPECIALISTS: &str = "specialists";
pub const SPECIALIST_SUMMARY: &str = "specialists/summary.json";
pub const METRICS: &str = "reports/metrics.json";
pub const PER_DOMAIN: &str = "reports/per_domain.csv";
pub const PREDICTIONS: &str = "reports/predictions_test.jsonl";
pub const EVAL_AUDIT: &str = "reports/audit_eval.jsonl";
pub const ANYTIME: &str = "reports/anytime.csv";
pub const REPORT_FRONTIER: &str = "reports/frontier.csv";
pub const AUDIT: &str = "audit.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const TIMINGS: &str = "timings.json";

pub const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];

pub fn rows_file(split: &str) -> String {
    format!("rows_{split}.jsonl")
}

pub fn features_file(split: &str) -> String {
    format!("features_{split}.bin")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    /// Artifacts produced by each command.
    pub stages: BTreeMap<String, Vec<String>>,
    pub timings_file: String,
}

pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn read(&self, rel: &str, producer: &'static str) -> CliResult<Vec<u8>> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(CliError::Missing {
                path: p.display().to_string(),
                producer,
            });
        }
        std::fs::read(&p).map_err(|source| CliError::Io {
            path: p.display().to_string(),
            source,
        })
    }

    pub fn read_string(&self, rel: &str, producer: &'static str) -> CliResult<String> {
        String::from_utf8(self.read(rel, producer)?)
            .map_err(|e| CliError::Data(format!("{rel}: {e}")))
    }

    fn write_raw(&self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
        std::fs::write(&p, bytes).map_err(|source| CliError::Io {
            path: p.display().to_string(),
            source,
        })
    }

    pub fn load_manifest(&self) -> CliResult<Option<Manifest>> {
        if !self.exists(MANIFEST) {
            return Ok(None);
        }
        let text = self.read_string(MANIFEST, "synth")?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// Refuse to mix artifacts produced under another configuration.
    pub fn check_config(&self, hash: &str) -> CliResult<()> {
        if let Some(m) = self.load_manifest()? {
            if m.config_hash != hash {
                return Err(CliError::Config(format!(
                    "config hash {} differs from the hash {} recorded in {}; rerun from `consult synth` or use a fresh workdir",
                    &hash[..12],
                    &m.config_hash[..m.config_hash.len().min(12)],
                    self.path(MANIFEST).display()
                )));
            }
        }
        Ok(())
    }
}

/// Outputs of one command; committed into the manifest at the end.
pub struct Stage<'a> {
    wd: &'a Workdir,
    name: &'static str,
    hash: String,
    outputs: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    started: std::time::Instant,
}

impl<'a> Stage<'a> {
    pub fn new(wd: &'a Workdir, name: &'static str, hash: &str) -> Self {
        Self {
            wd,
            name,
            hash: hash.to_string(),
            outputs: BTreeMap::new(),
            inputs: BTreeMap::new(),
            started: std::time::Instant::now(),
        }
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        self.wd.write_raw(rel, bytes)?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs
            .insert(path.display().to_string(), sha256_hex(bytes));
    }

    /// Merge this stage into the manifest. `fresh` starts a new manifest.
    pub fn commit(self, fresh: bool) -> CliResult<()> {
        let mut m = if fresh {
            None
        } else {
            self.wd.load_manifest()?
        }
        .unwrap_or_default();
        m.tool_version = env!("CARGO_PKG_VERSION").to_string();
        m.config_hash = self.hash.clone();
        m.timings_file = TIMINGS.to_string();
        if let Some(old) = m.stages.get(self.name) {
            for rel in old.clone() {
                m.artifacts.remove(&rel);
            }
        }
        m.stages.insert(
            self.name.to_string(),
            self.outputs.keys().cloned().collect(),
        );
        m.artifacts.extend(self.outputs);
        m.inputs.extend(self.inputs);
        let mut text = serde_json::to_string_pretty(&serde_json::to_value(&m)?)?;
        text.push('\n');
        self.wd.write_raw(MANIFEST, text.as_bytes())?;

        let mut timings: BTreeMap<String, f64> = if fresh || !self.wd.exists(TIMINGS) {
            BTreeMap::new()
        } else {
            serde_json::from_str(&self.wd.read_string(TIMINGS, "synth")?).unwrap_or_default()
        };
        timings.insert(self.name.to_string(), self.started.elapsed().as_secs_f64());
        self.wd
            .write_raw(TIMINGS, serde_json::to_string_pretty(&timings)?.as_bytes())
    }
}
