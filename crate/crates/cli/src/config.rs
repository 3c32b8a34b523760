//! Experiment configuration file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use msr_core::corrupt::Variant;
use msr_core::eval::{EvalOptions, TaskSpec};
use msr_core::model::{ChannelPlan, LossConfig};
use msr_core::phantom::CohortSpec;
use msr_core::rng::{fnv1a, mix};
use msr_core::train::TrainConfig;

use crate::error::{CliError, Result};

/// Hyper-parameter grid for `gridsearch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Training schedule scale used for every grid point.
    pub scale: f64,
    /// Fold whose training and validation subjects are used.
    pub fold: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lambda: vec![0.0001, 0.001, 0.01],
            gamma: vec![0.0, 0.0005, 0.005],
            alpha: vec![0.0, 0.1, 0.3],
            sigma: vec![0.0, 0.001, 0.1],
            scale: 0.02,
            fold: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Cohort name; artifacts go to `<output_dir>/<name>/`.
    pub name: String,
    pub output_dir: PathBuf,
    /// Seeds every training job; see [`job_seed`].
    pub master_seed: u64,
    pub cohort: CohortSpec,
    pub channel_plan: ChannelPlan,
    pub variants: Vec<Variant>,
    pub loss: LossConfig,
    /// `train.seed` is replaced by each job's derived seed.
    pub train: TrainConfig,
    pub tasks: Vec<TaskSpec>,
    pub eval: EvalOptions,
    /// Training pools keep patches with stenosis grade below this.
    pub normal_grade_threshold: f64,
    /// Calibration uses validation patches with stenosis grade below this.
    pub calibration_grade_threshold: f64,
    pub inference_batch: usize,
    pub gridsearch: GridSpec,
    /// Free-form notes on where the defaults come from. Not read.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

fn default_notes() -> BTreeMap<String, String> {
    [
        (
            "variants",
            "corruption per variant (alpha, sigma): SAE (0, 0), SDAE (0, 0.1), SAE-MSR (0.1, 0), SDAE-MSR (0.1, 0.001); \
             lambda=0.001 and gamma=0.0005 for all four",
        ),
        (
            "train",
            "stages are (epochs, minibatches per epoch, learning rate); momentum 0.9, batch 32; \
             scale multiplies every stage's epoch count",
        ),
        ("tasks", "A: grade < 0.3 against > 0.7; B: grade < 0.4 against >= 0.4"),
        ("seeds", "job seed = mix(mix(master_seed, fnv1a(variant name)), fold)"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

impl Default for ExperimentConfig {
    /// Desk preset: small patches and a shortened schedule.
    fn default() -> Self {
        ExperimentConfig {
            name: "desk".into(),
            output_dir: "out".into(),
            master_seed: 0,
            cohort: CohortSpec::default(),
            channel_plan: ChannelPlan {
                encoder: [2, 64],
                decoder: [4, 2],
            },
            variants: Variant::ALL.to_vec(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            tasks: vec![TaskSpec::task_a(), TaskSpec::task_b()],
            eval: EvalOptions::default(),
            normal_grade_threshold: 0.2,
            calibration_grade_threshold: 0.2,
            inference_batch: 64,
            gridsearch: GridSpec::default(),
            notes: default_notes(),
        }
    }
}

impl ExperimentConfig {
    /// Full-size patches, cohort and schedule.
    pub fn full() -> Self {
        ExperimentConfig {
            name: "full".into(),
            cohort: CohortSpec::full(),
            channel_plan: ChannelPlan::default(),
            train: TrainConfig::full(),
            ..ExperimentConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: msr_core::Error| CliError::config(e.to_string());
        self.cohort.validate().map_err(wrap)?;
        self.loss.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        for t in &self.tasks {
            t.validate().map_err(wrap)?;
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(CliError::config(format!("cohort name {:?} must be a plain directory name", self.name)));
        }
        if self.variants.is_empty() {
            return Err(CliError::config("no variants configured"));
        }
        let mut seen = self.variants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.variants.len() {
            return Err(CliError::config("variant list has duplicates"));
        }
        if self.channel_plan.encoder.contains(&0) || self.channel_plan.decoder.contains(&0) {
            return Err(CliError::config("channel counts must be positive"));
        }
        for (key, v) in [
            ("normal_grade_threshold", self.normal_grade_threshold),
            ("calibration_grade_threshold", self.calibration_grade_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) || v == 0.0 {
                return Err(CliError::config(format!("{key} must lie in (0, 1], got {v}")));
            }
        }
        if self.inference_batch == 0 {
            return Err(CliError::config("inference_batch must be >= 1"));
        }
        let g = &self.gridsearch;
        if !(g.scale > 0.0 && g.scale.is_finite()) {
            return Err(CliError::config(format!("gridsearch.scale must be positive, got {}", g.scale)));
        }
        if g.fold >= self.cohort.k_folds {
            return Err(CliError::config(format!("gridsearch.fold {} outside 0..{}", g.fold, self.cohort.k_folds)));
        }
        self.channel_plan.warn_if_undercomplete(self.cohort.patch);
        Ok(())
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.output_dir.join(&self.name)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.cohort_dir().join("data")
    }

    pub fn job_dir(&self, variant: Variant, fold: usize) -> PathBuf {
        self.cohort_dir().join(variant.name()).join(format!("fold{fold}"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.cohort_dir().join("report")
    }

    pub fn gridsearch_dir(&self) -> PathBuf {
        self.cohort_dir().join("gridsearch")
    }
}

/// `mix(mix(master, fnv1a(variant name)), fold)`.
pub fn job_seed(master: u64, variant: &str, fold: usize) -> u64 {
    mix(mix(master, fnv1a(variant.as_bytes())), fold as u64)
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const TRAIN_POOL: &str = "train_pool.csv";
pub const SCORES: &str = "scores.csv";
pub const SUMMARY: &str = "summary.json";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for cfg in [ExperimentConfig::default(), ExperimentConfig::full()] {
            cfg.validate().unwrap();
            let back: ExperimentConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn desk_preset_is_overcomplete() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.channel_plan.is_overcomplete(cfg.cohort.patch));
        assert_eq!(cfg.channel_plan.code_size(cfg.cohort.patch), 1024);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json().unwrap()).unwrap();
        v["extra"] = 1.into();
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = ExperimentConfig::default();
        cfg.cohort.k_folds = 7;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.variants.push(Variant::Sae);
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn job_seeds_differ() {
        let a = job_seed(0, "SAE", 0);
        assert_ne!(a, job_seed(0, "SAE", 1));
        assert_ne!(a, job_seed(0, "SDAE", 0));
        assert_ne!(a, job_seed(1, "SAE", 0));
        assert_eq!(a, job_seed(0, "SAE", 0));
    }
}
