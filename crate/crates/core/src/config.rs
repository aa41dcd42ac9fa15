//! Experiment configuration: one TOML document with a section per stage.
//! Every key is optional; omitted keys take the documented defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::SacConfig;
use crate::certificate::{LabelConfig, MetricTrainingConfig, ValidationConfig};
use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::plant::{HydraulicParams, UncertaintyConfig};
use crate::surrogate::{CollectConfig, ModelTrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub episodes: usize,
    /// Environment for the second stage (`plant` or `surrogate`).
    pub env: String,
    /// Environment for the first stage.
    pub pretrain_env: String,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            episodes: 40,
            env: "plant".into(),
            pretrain_env: "surrogate".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub frequencies: Vec<f64>,
    pub amplitude: f64,
    pub offset: f64,
    pub duration_s: f64,
    /// Discarded at the start of every run before the RMSE window.
    pub transient_s: f64,
    pub seeds: usize,
    pub filter: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            frequencies: vec![0.5, 1.0, 1.5, 2.0],
            amplitude: 300.0,
            offset: 800.0,
            duration_s: 12.0,
            transient_s: 2.0,
            seeds: 5,
            filter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayConfig {
    pub frequency: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub duration_s: f64,
    /// Any of `finetuned`, `pretrained`, `fixed`.
    pub controllers: Vec<String>,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            frequency: 2.0,
            amplitude: 300.0,
            offset: 800.0,
            duration_s: 6.0,
            controllers: vec!["finetuned".into(), "pretrained".into(), "fixed".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Plant and controller sample time (s).
    pub dt: f64,
    pub plant: HydraulicParams,
    pub uncertainty: UncertaintyConfig,
    pub controller: ControllerConfig,
    pub collect: CollectConfig,
    pub model: ModelTrainingConfig,
    pub labels: LabelConfig,
    pub metric: MetricTrainingConfig,
    pub validation: ValidationConfig,
    pub agent: SacConfig,
    pub finetune: FinetuneConfig,
    pub evaluate: EvaluateConfig,
    pub replay: ReplayConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dt: 1e-3,
            plant: HydraulicParams::default(),
            uncertainty: UncertaintyConfig::default(),
            controller: ControllerConfig::default(),
            collect: CollectConfig::default(),
            model: ModelTrainingConfig::default(),
            labels: LabelConfig::default(),
            metric: MetricTrainingConfig::default(),
            validation: ValidationConfig::default(),
            agent: SacConfig::default(),
            finetune: FinetuneConfig::default(),
            evaluate: EvaluateConfig::default(),
            replay: ReplayConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        self.plant.validate()?;
        self.uncertainty.validate()?;
        self.model.validate()?;
        self.metric.validate()?;
        self.agent.validate()?;
        crate::dynamics::BACKENDS
            .iter()
            .find(|b| **b == self.validation.dynamics)
            .ok_or_else(|| Error::Config(format!("validation.dynamics: unknown backend `{}`", self.validation.dynamics)))?;
        for env in [&self.finetune.env, &self.finetune.pretrain_env] {
            if !crate::agent::ENVIRONMENTS.contains(&env.as_str()) {
                return Err(Error::Config(format!("finetune: unknown environment `{env}`")));
            }
        }
        for r in [&self.collect.reference, &self.labels.reference, &self.validation.reference, &self.agent.reference] {
            if crate::reference::lookup(&r.kind).is_none() {
                return Err(Error::Config(format!("unknown reference kind `{}`", r.kind)));
            }
        }
        for c in &self.replay.controllers {
            if !CONTROLLERS.contains(&c.as_str()) {
                return Err(Error::Config(format!("replay: unknown controller `{c}` (known: {CONTROLLERS:?})")));
            }
        }
        if self.evaluate.transient_s >= self.evaluate.duration_s {
            return Err(Error::Config("evaluate.transient_s must be shorter than evaluate.duration_s".into()));
        }
        Ok(())
    }
}

/// Controller names used in evaluation and replay.
pub const CONTROLLERS: [&str; 3] = ["finetuned", "pretrained", "fixed"];

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Independent stream seed for a named stage.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
