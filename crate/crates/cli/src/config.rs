//! Experiment configuration: built-in defaults, then an optional JSON file,
//! then `PHP_`-prefixed environment variables, then command-line flags.
//!
//! Nested keys are reached with a double underscore, e.g.
//! `PHP_TRAIN__EPOCHS_PER_TASK=2` or `PHP_ENCODER__SEED=3`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use figment::providers::{Env, Format, Json, Serialized};
use figment::Figment;
use php_av::encoder::EncoderConfig;
use php_av::engine::{all_orders, TrainConfig};
use php_av::model::{ComponentSet, ModelConfig, PlacementConfig};
use php_av::synthetic::{default_suite, TaskSpec};
use php_av::tmdg::TmdgConfig;
use php_av::tmi::TmiConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "PHP_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub tasks: Vec<TaskSpec>,
    /// Task orders to run; empty means every permutation of `tasks`.
    pub orders: Vec<Vec<String>>,
    pub train: TrainConfig,
    pub placement: PlacementConfig,
    pub components: ComponentSet,
    pub encoder: EncoderConfig,
    pub tmdg: TmdgConfig,
    pub tmi: TmiConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tasks: default_suite(),
            orders: Vec::new(),
            train: TrainConfig::default(),
            placement: PlacementConfig::default(),
            components: ComponentSet::all(),
            encoder: EncoderConfig::default(),
            tmdg: TmdgConfig::default(),
            tmi: TmiConfig::default(),
            output_dir: PathBuf::from("php-out"),
        }
    }
}

/// Command-line values that win over the file and the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub orders: Vec<String>,
    pub seed: Option<u64>,
    pub placement: Option<String>,
    pub components: Option<String>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(file: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut fig = Figment::from(Serialized::defaults(Self::default()));
        if let Some(path) = file {
            if !path.is_file() {
                return Err(CliError::validation(format!(
                    "config file {} does not exist",
                    path.display()
                )));
            }
            fig = fig.merge(Json::file(path));
        }
        fig = fig.merge(Env::prefixed(ENV_PREFIX).split("__"));
        let mut cfg: Self = fig
            .extract()
            .map_err(|e| CliError::validation(format!("config: {e}")))?;

        if !overrides.orders.is_empty() {
            cfg.orders = overrides
                .orders
                .iter()
                .map(|o| o.split(',').map(|t| t.trim().to_string()).collect())
                .collect();
        }
        if let Some(seed) = overrides.seed {
            cfg.train.seed = seed;
        }
        if let Some(p) = &overrides.placement {
            cfg.placement = p.parse()?;
        }
        if let Some(c) = &overrides.components {
            cfg.components = c.parse()?;
        }
        if let Some(out) = &overrides.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id.clone()).collect()
    }

    /// The configured orders, or every permutation when none are given.
    pub fn resolved_orders(&self) -> Vec<Vec<String>> {
        if self.orders.is_empty() {
            all_orders(&self.task_ids())
        } else {
            self.orders.clone()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let first = self
            .tasks
            .first()
            .ok_or_else(|| CliError::validation("no tasks configured"))?;
        let mut ids = BTreeSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !ids.insert(t.task_id.as_str()) {
                return Err(CliError::validation(format!(
                    "task {} declared twice",
                    t.task_id
                )));
            }
            if t.video_grid != first.video_grid
                || t.audio_grid != first.audio_grid
                || t.base_channels != first.base_channels
            {
                return Err(CliError::validation(format!(
                    "task {} has a different token layout than {}",
                    t.task_id, first.task_id
                )));
            }
        }
        if first.base_channels != self.encoder.input_channels {
            return Err(CliError::validation(format!(
                "tasks carry {} channels but the encoder expects {}",
                first.base_channels, self.encoder.input_channels
            )));
        }
        let orders = self.resolved_orders();
        for o in &orders {
            let seen: BTreeSet<&str> = o.iter().map(String::as_str).collect();
            if seen.len() != o.len() {
                return Err(CliError::validation(format!(
                    "order {} repeats a task",
                    o.join(",")
                )));
            }
            if let Some(t) = o.iter().find(|t| !ids.contains(t.as_str())) {
                return Err(CliError::validation(format!(
                    "order {} names undeclared task {t}",
                    o.join(",")
                )));
            }
            if o.len() != orders[0].len() {
                return Err(CliError::validation("orders must all have the same length"));
            }
        }
        self.train.validate()?;
        self.model_config().validate()?;
        Ok(())
    }

    /// Model configuration for the full method. The trainable initialization
    /// shares the training seed.
    pub fn model_config(&self) -> ModelConfig {
        let first = &self.tasks[0];
        ModelConfig {
            encoder: self.encoder.clone(),
            placement: self.placement,
            components: self.components.clone(),
            tmdg: self.tmdg,
            tmi: self.tmi,
            video_positions: first.video_positions(),
            audio_positions: first.audio_positions(),
            seed: self.train.seed,
            ..ModelConfig::default()
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output_dir.join("runs")
    }
}
