//! Experiment configuration: JSON with a strict schema (unknown keys are
//! rejected so stale configs fail loudly).

use std::path::{Path, PathBuf};

use cyclediff_core::denoiser::DenoiserConfig;
use cyclediff_core::loss::TrainConfig;
use cyclediff_core::schedule::ScheduleKind;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

fn default_lr() -> f64 {
    4e-5
}
fn default_wd() -> f64 {
    1e-3
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            weight_decay: default_wd(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Cycle,
    Ancestral,
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cycle" => Ok(SamplerKind::Cycle),
            "ancestral" => Ok(SamplerKind::Ancestral),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(format!("unknown sampler '{other}'")),
        }
    }
}

/// Top-level experiment configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    /// Reverse steps used at sampling time (respacing target).
    #[serde(default = "default_sample_steps")]
    pub sample_steps: usize,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    #[serde(default = "default_mc_runs")]
    pub mc_runs: usize,
    /// Random patch draws per case per epoch.
    #[serde(default = "default_patches_per_case")]
    pub patches_per_case: usize,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_schedule() -> ScheduleKind {
    ScheduleKind::Cosine
}
fn default_sample_steps() -> usize {
    16
}
fn default_sampler() -> SamplerKind {
    SamplerKind::Cycle
}
fn default_mc_runs() -> usize {
    5
}
fn default_patches_per_case() -> usize {
    2
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| AppError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Schema validation before any compute.
    pub fn validate(&self) -> AppResult<Self> {
        self.train.validate().map_err(AppError::from)?;
        if self.sample_steps == 0 || self.sample_steps > self.train.n_steps {
            return Err(AppError::config(format!(
                "sample_steps {} outside 1..={}",
                self.sample_steps, self.train.n_steps
            )));
        }
        if self.mc_runs == 0 || self.patches_per_case == 0 {
            return Err(AppError::config("mc_runs and patches_per_case must be positive"));
        }
        let p = self.train.patch;
        self.denoiser
            .validate([p[2], p[1], p[0]])
            .map_err(|e| AppError::config(format!("patch/denoiser: {e}")))?;
        Ok(self.clone())
    }

    /// Checks referenced paths: the data directory must exist; checkpoint
    /// and report directories are created.
    pub fn prepare_paths(&self) -> AppResult<()> {
        if !self.paths.data_dir.is_dir() {
            return Err(AppError::config(format!(
                "data directory {} not found",
                self.paths.data_dir.display()
            )));
        }
        std::fs::create_dir_all(&self.paths.checkpoint_dir)?;
        std::fs::create_dir_all(&self.paths.report_dir)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "paths": {"data_dir": "/tmp/d", "checkpoint_dir": "/tmp/c", "report_dir": "/tmp/r"}
        }"#
        .to_string()
    }

    #[test]
    fn defaults_fill_in() {
        let cfg: ExperimentConfig = serde_json::from_str(&minimal_json()).unwrap();
        assert_eq!(cfg.train.n_steps, 256);
        assert_eq!(cfg.sample_steps, 16);
        assert_eq!(cfg.mc_runs, 5);
        assert_eq!(cfg.schedule, ScheduleKind::Cosine);
        assert_eq!(cfg.sampler, SamplerKind::Cycle);
        assert_eq!(cfg.denoiser.base_width, 16);
        assert_eq!(cfg.train.patch, [32, 32, 8]);
        assert_eq!(cfg.optimizer.learning_rate, 4e-5);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"{
            "paths": {"data_dir": "/tmp/d", "checkpoint_dir": "/tmp/c", "report_dir": "/tmp/r"},
            "not_a_real_key": 1
        }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(bad).is_err());
    }

    #[test]
    fn sample_steps_must_not_exceed_train_steps() {
        let mut cfg: ExperimentConfig = serde_json::from_str(&minimal_json()).unwrap();
        cfg.sample_steps = 512;
        assert!(cfg.validate().is_err());
    }
}
