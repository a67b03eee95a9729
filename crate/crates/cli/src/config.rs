//! Pipeline configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use consult_core::dispatch_policy::{Grid, PolicyOptions, FAIL_OPEN_FLOOR, LIFE_CONSTRAINT};
use consult_core::eval_harness::LatencyModel;
use consult_core::event_schema::{SequenceConfig, DEFAULT_GAP_HOURS, MAX_SEQ_LEN};
use consult_core::prefix_features::{DEFAULT_K, DEFAULT_SVD_RANK};
use consult_core::router::{RouterConfig, DEFAULT_C, DEFAULT_MAX_ITER};
use consult_core::specialist::{EarlyStop, SpecialistConfig, TrainConfig};
use consult_core::synth_cohort::DEFAULT_MIXTURE;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Output directory; not part of the config hash.
    #[serde(skip_serializing)]
    pub workdir: PathBuf,
    pub cohort: CohortSection,
    pub sequence: SequenceSection,
    pub router: RouterSection,
    pub policy: PolicySection,
    pub specialist: SpecialistSection,
    pub latency: LatencySection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            workdir: PathBuf::from("run"),
            cohort: CohortSection::default(),
            sequence: SequenceSection::default(),
            router: RouterSection::default(),
            policy: PolicySection::default(),
            specialist: SpecialistSection::default(),
            latency: LatencySection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub total: usize,
    pub mixture: [f64; 5],
    /// Explicit per-domain counts; overrides `total` and `mixture`.
    pub counts: Option<[usize; 5]>,
    pub signal_strength: Option<f64>,
    pub multi_label_rate: f64,
    /// Grammar JSON replacing the built-in grammars.
    pub grammars: Option<PathBuf>,
    /// Episode JSONL files ingested instead of generating a cohort.
    pub inputs: Vec<PathBuf>,
    /// Proportional sample size applied after ingestion.
    pub sample: Option<usize>,
}

impl Default for CohortSection {
    fn default() -> Self {
        Self {
            total: 5000,
            mixture: DEFAULT_MIXTURE,
            counts: None,
            signal_strength: None,
            multi_label_rate: 0.0,
            grammars: None,
            inputs: Vec::new(),
            sample: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceSection {
    pub gap_hours: Vec<u32>,
    pub max_len: usize,
    pub min_count: u64,
    pub whitelist: Vec<String>,
}

impl Default for SequenceSection {
    fn default() -> Self {
        Self {
            gap_hours: DEFAULT_GAP_HOURS.to_vec(),
            max_len: MAX_SEQ_LEN,
            min_count: 1,
            whitelist: Vec::new(),
        }
    }
}

impl SequenceSection {
    pub fn sequence_config(&self) -> SequenceConfig {
        SequenceConfig {
            gap_hours: self.gap_hours.clone(),
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterSection {
    pub k: usize,
    pub use_time: bool,
    pub use_weights: bool,
    pub calibrate: bool,
    pub c: f64,
    pub max_iter: usize,
    pub svd_rank: usize,
    pub platt_folds: usize,
    pub split: [f64; 3],
}

impl Default for RouterSection {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            use_time: false,
            use_weights: true,
            calibrate: true,
            c: DEFAULT_C,
            max_iter: DEFAULT_MAX_ITER,
            svd_rank: DEFAULT_SVD_RANK,
            platt_folds: 3,
            split: [0.70, 0.10, 0.20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub constraint: f64,
    pub fail_open_floor: f64,
    pub life_guard: Option<f64>,
    pub global_argmax: bool,
    /// Grid bounds in percent: `[lo, hi]` for each threshold and the step.
    pub tau_hi_percent: [u32; 2],
    pub tau_lo_percent: [u32; 2],
    pub step_percent: u32,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            constraint: LIFE_CONSTRAINT,
            fail_open_floor: FAIL_OPEN_FLOOR,
            life_guard: None,
            global_argmax: false,
            tau_hi_percent: [50, 95],
            tau_lo_percent: [10, 50],
            step_percent: 5,
        }
    }
}

impl PolicySection {
    pub fn grid(&self) -> Grid {
        Grid::from_percent_ranges(
            (self.tau_hi_percent[0], self.tau_hi_percent[1]),
            (self.tau_lo_percent[0], self.tau_lo_percent[1]),
            self.step_percent,
        )
    }

    pub fn options(&self) -> PolicyOptions {
        PolicyOptions {
            life_guard: self.life_guard,
            global_argmax: self.global_argmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecialistSection {
    /// `desk` or `paper` preset for the architecture.
    pub preset: String,
    pub dropout: f64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub early_stop: EarlyStop,
    /// Uniform subsample cap on training episodes per domain.
    pub scope: Option<usize>,
    /// When set, a shared base model is trained on all domains and each
    /// specialist is a low-rank adapter of this rank.
    pub lora_rank: Option<usize>,
    pub lora_alpha: f64,
    pub suggest_k: usize,
}

impl Default for SpecialistSection {
    fn default() -> Self {
        let tc = TrainConfig::default();
        Self {
            preset: "desk".into(),
            dropout: 0.1,
            peak_lr: tc.peak_lr,
            batch_size: tc.batch_size,
            epochs: tc.epochs,
            early_stop: EarlyStop::DevLoss,
            scope: Some(600),
            lora_rank: None,
            lora_alpha: 8.0,
            suggest_k: 3,
        }
    }
}

impl SpecialistSection {
    pub fn model_config(&self, vocab_size: usize) -> CliResult<SpecialistConfig> {
        let mut c = match self.preset.as_str() {
            "desk" => SpecialistConfig::desk(vocab_size),
            "paper" => SpecialistConfig::paper(vocab_size),
            other => {
                return Err(CliError::Config(format!(
                    "unknown specialist preset {other:?}"
                )))
            }
        };
        c.dropout = self.dropout;
        Ok(c)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            peak_lr: self.peak_lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            early_stop: self.early_stop,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySection {
    pub router_ms: f64,
    pub expert_ms: [f64; 5],
}

impl Default for LatencySection {
    fn default() -> Self {
        let lm = LatencyModel::default();
        Self {
            router_ms: lm.router_ms,
            expert_ms: lm.expert_ms,
        }
    }
}

impl LatencySection {
    pub fn model(&self) -> LatencyModel {
        LatencyModel {
            router_ms: self.router_ms,
            expert_ms: self.expert_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bootstrap: usize,
    pub level: f64,
    /// Timestamp written into batch audit records.
    pub timestamp: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            bootstrap: 1000,
            level: 0.95,
            timestamp: "1970-01-01T00:00:00Z".into(),
        }
    }
}

/// Named random sub-streams, one per stage.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const SAMPLE: u64 = 2;
    pub const SVD: u64 = 3;
    pub const SPECIALIST: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.router.k == 0 {
            return Err(CliError::Config("router.k must be at least 1".into()));
        }
        if self.cohort.inputs.is_empty() && self.cohort.counts.is_none() && self.cohort.total == 0 {
            return Err(CliError::Config("cohort.total must be positive".into()));
        }
        if !(self.policy.constraint > 0.0 && self.policy.constraint <= 1.0) {
            return Err(CliError::Config(format!(
                "policy.constraint {} outside (0, 1]",
                self.policy.constraint
            )));
        }
        if self.policy.grid().points.is_empty() {
            return Err(CliError::Config("threshold grid is empty".into()));
        }
        self.latency.model().validate()?;
        if let Some(s) = self.cohort.signal_strength {
            if !(0.0..=1.0).contains(&s) {
                return Err(CliError::Config(format!(
                    "cohort.signal_strength {s} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Seed of a named stage stream.
    pub fn stage_seed(&self, stream: u64) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream)
    }

    pub fn router_config(&self) -> RouterConfig {
        RouterConfig {
            k: self.router.k,
            use_time: self.router.use_time,
            use_weights: self.router.use_weights,
            calibrate: self.router.calibrate,
            c: self.router.c,
            max_iter: self.router.max_iter,
            svd_rank: self.router.svd_rank,
            platt_folds: self.router.platt_folds,
            seed: self.stage_seed(streams::SVD),
        }
    }

    /// SHA-256 of the canonical JSON form (sorted keys, workdir excluded).
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let text = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_hash() {
        let c = PipelineConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.hash(), c.hash());
        let mut other = c.clone();
        other.workdir = PathBuf::from("elsewhere");
        assert_eq!(other.hash(), c.hash());
        other.seed = 8;
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<PipelineConfig>("sede = 3").is_err());
        let c: PipelineConfig = toml::from_str("seed = 3\n[router]\nk = 3\n").unwrap();
        assert_eq!((c.seed, c.router.k, c.router.c), (3, 3, 2.0));
    }
}
