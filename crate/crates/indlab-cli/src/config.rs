//! Experiment configuration: a single JSON document with nested blocks
//! mirroring the library configs, plus flat `--set key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use indlab::datagen::DataSpec;
use indlab::measures::MeasureConfig;
use indlab::model::ModelConfig;
use indlab::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    TrainDynamics,
    PoolSweep,
    RopeDeltaSweep,
    RankSweep,
    InterventionSuite,
    SpikedOracle,
}

impl std::fmt::Display for Recipe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Recipe::TrainDynamics => "train_dynamics",
            Recipe::PoolSweep => "pool_sweep",
            Recipe::RopeDeltaSweep => "rope_delta_sweep",
            Recipe::RankSweep => "rank_sweep",
            Recipe::InterventionSuite => "intervention_suite",
            Recipe::SpikedOracle => "spiked_oracle",
        };
        f.write_str(s)
    }
}

/// Optimizer / loop block (model, data, and measure blocks live separately).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub ckpt_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Stop as soon as an evaluation reaches this OOD error, when set.
    pub stop_at_ood: Option<f64>,
    /// Checkpoint directory to warm-start from instead of a fresh init.
    pub warm_start: Option<std::path::PathBuf>,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            steps: t.steps,
            eval_every: t.eval_every,
            ckpt_every: t.ckpt_every,
            beta1: t.beta1,
            beta2: t.beta2,
            eps_adam: t.eps_adam,
            stop_at_ood: None,
            warm_start: None,
        }
    }
}

/// Intervention-suite block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterventionBlock {
    /// Block length of the (s#, s#, s#) evaluation triples.
    pub probe_block_len: usize,
    /// Number of evaluation triples.
    pub n_eval: usize,
    /// Diagonal-score screening cutoff.
    pub delta: f64,
    /// Screened-list cap.
    pub cap: usize,
    /// Fraction of all heads edited by projection.
    pub edit_fraction: f64,
    /// Bridge rank; defaults to max(2, round(d/20)).
    pub bridge_rank: Option<usize>,
    /// Top-K removal sizes.
    pub removal_ks: Vec<usize>,
    /// Random-baseline / shuffle seeds.
    pub seeds: u64,
    /// Probes for head ranking.
    pub score_probe_count: usize,
    pub score_block_len: usize,
}

impl Default for InterventionBlock {
    fn default() -> Self {
        Self {
            probe_block_len: 20,
            n_eval: 50,
            delta: 2.3,
            cap: 10,
            edit_fraction: 0.25,
            bridge_rank: None,
            removal_ks: vec![2, 4, 8],
            seeds: 5,
            score_probe_count: 100,
            score_block_len: 25,
        }
    }
}

/// Sweep grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    pub pool_sizes: Vec<usize>,
    pub deltas: Vec<usize>,
    pub ranks: Vec<usize>,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self { pool_sizes: vec![100, 250, 500, 750, 1000], deltas: vec![0, 5, 10, 15, 20], ranks: vec![5, 10, 15, 20] }
    }
}

/// Spiked-oracle block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpikedBlock {
    pub d: usize,
    pub r: usize,
    pub k: usize,
    pub noise_scale: f64,
    pub delta: f64,
    pub cap: usize,
    pub decoys: usize,
    pub n_seeds: u64,
    pub required_successes: u64,
}

impl Default for SpikedBlock {
    fn default() -> Self {
        Self { d: 64, r: 4, k: 8, noise_scale: 0.1, delta: 2.3, cap: 10, decoys: 0, n_seeds: 20, required_successes: 18 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub recipe: Recipe,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "ModelConfig::default_2l1h")]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub measure: MeasureConfig,
    #[serde(default)]
    pub intervention: InterventionBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
    #[serde(default)]
    pub spiked: SpikedBlock,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&body)
            .map_err(|e| CliError::Config(format!("invalid JSON in {}: {e}", path.display())))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.is_empty() || self.name.contains('/') {
            return Err(CliError::Config("name must be a non-empty path segment".into()));
        }
        self.to_train_config()
            .validate()
            .map_err(|e| CliError::Config(format!("train/model: {e}")))?;
        Ok(())
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            steps: self.train.steps,
            eval_every: self.train.eval_every,
            ckpt_every: self.train.ckpt_every,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps_adam: self.train.eps_adam,
            seed: self.seed,
            data: self.data.clone(),
            model: self.model.clone(),
            measure: self.measure.clone(),
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }
}

/// Applies one `key.path=value` override. Values parse as JSON when they can
/// (numbers, booleans, arrays, null) and as strings otherwise.
pub fn apply_override(value: &mut serde_json::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
    let parsed: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut cursor = value;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(CliError::Config(format!("override {spec:?} has an empty key segment")));
        }
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override path {path:?}: {seg:?} is not an object")))?;
        if i == segments.len() - 1 {
            obj.insert(seg.to_string(), parsed);
            return Ok(());
        }
        cursor = obj.entry(seg.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    unreachable!("loop returns on the last segment")
}
