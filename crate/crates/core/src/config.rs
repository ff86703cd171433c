//! Experiment configuration: one TOML file covering every pipeline stage,
//! with defaults that form a consistent end-to-end setup.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::InferConfig;
use crate::metrics::MetricsConfig;
use crate::model::ModelConfig;
use crate::preprocess::PreprocessConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Where `synth` writes and the other commands read the dataset.
    pub data_dir: String,
    /// Where models, predictions and reports are written.
    pub out_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data_dir: "data".into(), out_dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    #[serde(default = "default_preprocess")]
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub metrics: MetricsConfig,
}

/// The synthetic records are generated at 32 Hz, so a factor of 8 brings
/// them to the model's 4 Hz input rate (180 s windows of 720 samples).
fn default_preprocess() -> PreprocessConfig {
    PreprocessConfig { downsample_factor: 8, ..Default::default() }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            preprocess: default_preprocess(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.preprocess.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.infer.validate()?;

        // the stages must agree on the sampling chain:
        // synth fs / downsample factor * window length = model input length
        let model_fs = self.synth.sampling_rate_hz / self.preprocess.downsample_factor as f64;
        let expected_len = model_fs * self.model.grid.window_s;
        if (expected_len - self.model.input_len as f64).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "inconsistent sampling chain: {} Hz / {} gives {} samples per {} s window, model expects {}",
                self.synth.sampling_rate_hz,
                self.preprocess.downsample_factor,
                expected_len,
                self.model.grid.window_s,
                self.model.input_len
            )));
        }
        if (self.preprocess.window_s - self.model.grid.window_s).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "preprocess window {} s does not match grid window {} s",
                self.preprocess.window_s, self.model.grid.window_s
            )));
        }
        Ok(())
    }
}
