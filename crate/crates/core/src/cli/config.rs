//! Experiment configuration. Every field has a default; the resolved value
//! of every field is written back to the run manifest, which is itself a
//! loadable configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::estimators::EstimatorId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    ToySnr,
    Train,
    BiasTest,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::ToySnr => "toy-snr",
            Experiment::Train => "train",
            Experiment::BiasTest => "bias-test",
        })
    }
}

impl FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "toy-snr" => Ok(Experiment::ToySnr),
            "train" => Ok(Experiment::Train),
            "bias-test" => Ok(Experiment::BiasTest),
            other => Err(CliError::Config(format!("unknown experiment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Linear-Gaussian model with independent inference bias.
    Toy,
    /// Linear-Gaussian model whose inference bias is tied to `theta`.
    ToyTied,
    /// Bernoulli MLP autoencoder.
    Vae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Ignored by the toy models, whose observation size is `latent_dim`.
    pub obs_dim: usize,
    /// Frozen inference variance of the toy models.
    pub q_variance: f64,
    /// Scale of the Glorot initialization of the autoencoder.
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Toy,
            latent_dim: 4,
            hidden_dim: 20,
            obs_dim: 64,
            q_variance: crate::models::toy::DEFAULT_Q_VARIANCE,
            init_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Estimator names, for example `iwae-dreg` or `rws-wake`.
    pub ids: Vec<String>,
    /// Mixing weight of `dreg-alpha`.
    pub alpha: f64,
    pub k_grid: Vec<usize>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            ids: ["iwae", "stl", "iwae-dreg", "rws-wake", "rws-dreg", "jvi1", "jvi1-dreg"]
                .map(String::from)
                .to_vec(),
            alpha: 0.5,
            k_grid: vec![1, 4, 8, 16, 64, 256, 1024],
        }
    }
}

impl EstimatorConfig {
    pub fn parsed_ids(&self) -> Result<Vec<EstimatorId>, CliError> {
        self.ids
            .iter()
            .map(|s| s.parse().map_err(|e: crate::estimators::EstimatorError| CliError::Config(e.to_string())))
            .collect()
    }

    pub fn alpha_for(&self, id: EstimatorId) -> Option<f64> {
        (id == EstimatorId::DregAlpha).then_some(self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementConfig {
    pub trials: usize,
    pub samples: usize,
    /// Draws used for the expected standard gradient that bias is measured
    /// against.
    pub reference_samples: usize,
    /// Standard deviation of the noise added to the optimal parameters.
    pub perturbation: f64,
    /// Significance level for bias verdicts.
    pub significance: f64,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        MeasurementConfig {
            trials: 10,
            samples: 1000,
            reference_samples: 10_000,
            perturbation: 0.01,
            significance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; training stops at whichever limit comes
    /// first.
    pub max_steps: usize,
    pub log_every: usize,
    /// Samples per held-out bound; zero means the training `K`.
    pub eval_k: usize,
    /// Number of held-out images scored at every log step.
    pub eval_images: usize,
    pub ema_decay: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 16,
            epochs: 1000,
            max_steps: 2000,
            log_every: 10,
            eval_k: 0,
            eval_images: 500,
            ema_decay: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic dataset size before splitting.
    pub synthetic_size: usize,
    /// Train / valid / test fractions of the synthetic data.
    pub fractions: [f64; 3],
    pub train_images: PathBuf,
    pub test_images: PathBuf,
    /// Validation images carved from the end of the IDX training file.
    pub valid_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            synthetic_size: 3000,
            fractions: [0.8, 0.1, 0.1],
            train_images: PathBuf::from("train-images-idx3-ubyte"),
            test_images: PathBuf::from("t10k-images-idx3-ubyte"),
            valid_size: 10_000,
        }
    }
}

/// Provenance block written into manifests; ignored on load apart from
/// being accepted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub output: PathBuf,
    pub model: ModelConfig,
    pub estimator: EstimatorConfig,
    pub measurement: MeasurementConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: Experiment::ToySnr,
            seed: 0,
            output: PathBuf::from("out"),
            model: ModelConfig::default(),
            estimator: EstimatorConfig::default(),
            measurement: MeasurementConfig::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            data: DataConfig::default(),
            run: None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The resolved configuration with a `[run]` block naming the crate
    /// version.
    pub fn manifest(&self) -> Result<String, CliError> {
        let mut m = self.clone();
        m.run = Some(RunInfo {
            version: env!("CARGO_PKG_VERSION").to_string(),
        });
        toml::to_string(&m).map_err(|e| CliError::Runtime(format!("cannot serialize manifest: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let ids = self.estimator.parsed_ids()?;
        if ids.is_empty() {
            return Err(invalid("estimator.ids is empty"));
        }
        if self.estimator.k_grid.is_empty() || self.estimator.k_grid.contains(&0) {
            return Err(invalid("estimator.k_grid must hold positive sample counts"));
        }
        if !(0.0..=1.0).contains(&self.estimator.alpha) {
            return Err(invalid("estimator.alpha must lie in [0, 1]"));
        }
        if self.model.latent_dim == 0 || self.model.hidden_dim == 0 || self.model.obs_dim == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if !(self.model.q_variance > 0.0) || !(self.model.init_gain > 0.0) {
            return Err(invalid("model.q_variance and model.init_gain must be positive"));
        }
        let m = &self.measurement;
        if m.samples < 2 || m.trials == 0 || m.reference_samples < 2 {
            return Err(invalid("measurement needs trials >= 1 and at least 2 samples"));
        }
        if !(m.perturbation >= 0.0) || !(m.significance > 0.0 && m.significance < 1.0) {
            return Err(invalid("measurement.perturbation must be >= 0 and significance in (0, 1)"));
        }
        let o = &self.optimizer;
        if !(o.step_size > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(invalid("optimizer settings out of range"));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.epochs == 0 || t.max_steps == 0 || t.log_every == 0 || t.eval_images == 0 {
            return Err(invalid("training sizes must be positive"));
        }
        if !(t.ema_decay > 0.0 && t.ema_decay < 1.0) {
            return Err(invalid("training.ema_decay must lie in (0, 1)"));
        }
        match self.experiment {
            Experiment::Train => {
                if self.model.kind != ModelKind::Vae {
                    return Err(invalid("train requires model.kind = \"vae\""));
                }
            }
            Experiment::ToySnr | Experiment::BiasTest => {
                if self.model.kind == ModelKind::Vae {
                    return Err(invalid(format!("{} requires a toy model", self.experiment)));
                }
            }
        }
        for id in &ids {
            if self.experiment == Experiment::Train && id.is_jvi() && self.estimator.k_grid.iter().any(|&k| k < 2) {
                return Err(invalid(format!("{id} needs K >= 2")));
            }
        }
        let f = self.data.fractions;
        if f.iter().any(|v| !(*v > 0.0)) || f.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(invalid("data.fractions must be positive and sum to at most 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_the_manifest() {
        let cfg = ExperimentConfig::default();
        let text = cfg.manifest().unwrap();
        assert!(text.contains("version = "));
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back.run.as_ref().unwrap().version, env!("CARGO_PKG_VERSION"));
        assert_eq!(ExperimentConfig { run: None, ..back }, cfg);
    }

    #[test]
    fn every_section_appears_in_the_manifest() {
        let text = ExperimentConfig::default().manifest().unwrap();
        for key in [
            "experiment", "seed", "output", "[model]", "[estimator]", "k_grid", "alpha", "[measurement]",
            "trials", "samples", "[optimizer]", "step_size", "beta1", "beta2", "[training]", "batch_size",
            "epochs", "[data]", "source", "[run]",
        ] {
            assert!(text.contains(key), "{key} missing from\n{text}");
        }
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("experiment = \"bias-test\"\nseed = 5\n[measurement]\nsamples = 10\n").unwrap();
        assert_eq!(cfg.experiment, Experiment::BiasTest);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.measurement.samples, 10);
        assert_eq!(cfg.measurement.trials, 10);
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            "experiment = \"nope\"",
            "bogus = 1",
            "[estimator]\nids = [\"vimco\"]",
            "[estimator]\nk_grid = [0]",
            "[estimator]\nalpha = 2.0",
            "experiment = \"train\"",
            "experiment = \"toy-snr\"\n[model]\nkind = \"vae\"",
            "[measurement]\nsamples = 1",
            "[optimizer]\nbeta2 = 1.0",
            "[data]\nfractions = [0.9, 0.2, 0.1]",
            "experiment = \"train\"\n[model]\nkind = \"vae\"\n[estimator]\nids = [\"jvi1\"]\nk_grid = [1]",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(bad), Err(CliError::Config(_))), "{bad}");
        }
    }
}
