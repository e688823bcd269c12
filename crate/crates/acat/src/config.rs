//! The run configuration: one JSON document driving every stage.
//! Unknown keys are rejected everywhere so typos fail fast.

use std::fs;
use std::path::{Path, PathBuf};

use acat_core::attention::{AblationFlags, AcatConfig};
use acat_core::counterfactual::CounterfactualConfig;
use acat_core::nets::TrainConfig;
use acat_core::saliency::SaliencyMethod;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its randomness from it.
    pub seed: u64,
    /// Output root; the --out flag overrides it.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub baseline: TrainSection,
    pub autoencoder: TrainSection,
    pub counterfactual: CounterfactualSection,
    pub saliency: SaliencySection,
    pub acat: AcatSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
        }
    }

    fn validate(&self, section: &str) -> Result<()> {
        if self.epochs == 0 {
            bail!("{section}.epochs must be at least 1");
        }
        if self.batch_size == 0 {
            bail!("{section}.batch_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            bail!("{section}.learning_rate must be finite and positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualSection {
    /// Class the search moves toward.
    #[serde(default)]
    pub target: usize,
    pub alpha: f32,
    pub steps: usize,
    pub step_size: f32,
}

impl CounterfactualSection {
    pub fn to_core(&self) -> CounterfactualConfig {
        CounterfactualConfig {
            target: self.target,
            alpha: self.alpha,
            steps: self.steps,
            step_size: self.step_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencySection {
    /// gradient | integrated-gradients | grad-cam | counterfactual
    pub method: String,
    /// Integration steps for integrated gradients.
    #[serde(default = "default_ig_steps")]
    pub steps: usize,
}

fn default_ig_steps() -> usize {
    32
}

pub fn parse_method(name: &str) -> Result<SaliencyMethod> {
    for m in [
        SaliencyMethod::Gradient,
        SaliencyMethod::IntegratedGradients,
        SaliencyMethod::GradCam,
        SaliencyMethod::Counterfactual,
    ] {
        if m.name() == name {
            return Ok(m);
        }
    }
    bail!(
        "unknown saliency method {name:?}; expected gradient, integrated-gradients, grad-cam or counterfactual"
    );
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcatSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default = "default_slice_hidden")]
    pub slice_hidden: usize,
    #[serde(default = "default_slice_dropout")]
    pub slice_dropout: f32,
    #[serde(default = "AblationFlags::full")]
    pub ablation: AblationFlags,
}

fn default_slice_hidden() -> usize {
    32
}

fn default_slice_dropout() -> f32 {
    0.1
}

impl AcatSection {
    pub fn to_acat_config(&self) -> AcatConfig {
        AcatConfig {
            ablation: self.ablation,
            slice_hidden: self.slice_hidden,
            slice_dropout: self.slice_dropout,
        }
    }

    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Seeds for the multi-seed experiments (ablations, dropout control).
    pub seeds: Vec<u64>,
    /// Input-noise scale for the pre-activation variance measurement.
    #[serde(default = "default_sigma")]
    pub sigma: f32,
    /// Dropout rates for the control experiment.
    #[serde(default = "default_dropout_ps")]
    pub dropout_ps: Vec<f32>,
}

fn default_sigma() -> f32 {
    1.0
}

fn default_dropout_ps() -> Vec<f32> {
    vec![0.2, 0.6]
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = fs::read(path)
            .with_context(|| format!("missing run config at {}", path.display()))?;
        let config: RunConfig = serde_json::from_slice(&bytes)
            .with_context(|| format!("invalid run config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.samples < 10 {
            bail!("dataset.samples must be at least 10 so the split has all three parts");
        }
        self.baseline.validate("baseline")?;
        self.autoencoder.validate("autoencoder")?;
        self.counterfactual.to_core().validate()?;
        if self.counterfactual.target >= 4 {
            bail!("counterfactual.target must name one of the 4 classes");
        }
        parse_method(&self.saliency.method)?;
        if self.saliency.steps == 0 {
            bail!("saliency.steps must be at least 1");
        }
        TrainSection {
            epochs: self.acat.epochs,
            batch_size: self.acat.batch_size,
            learning_rate: self.acat.learning_rate,
        }
        .validate("acat")?;
        if self.acat.slice_hidden == 0 {
            bail!("acat.slice_hidden must be at least 1");
        }
        if !(0.0..1.0).contains(&self.acat.slice_dropout) {
            bail!("acat.slice_dropout must lie in [0, 1)");
        }
        if self.eval.seeds.is_empty() {
            bail!("eval.seeds must list at least one seed");
        }
        if !(self.eval.sigma.is_finite() && self.eval.sigma >= 0.0) {
            bail!("eval.sigma must be finite and nonnegative");
        }
        for &p in &self.eval.dropout_ps {
            if !(0.0..1.0).contains(&p) {
                bail!("eval.dropout_ps entries must lie in [0, 1), got {p}");
            }
        }
        Ok(())
    }
}
