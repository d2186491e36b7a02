//! Pipeline configuration: one JSON document drives a whole run, and its
//! hash becomes the report's config fingerprint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::{Encoding, SplitSpec, SyntheticSpec};
use crate::predictor::LossKind;
use crate::refine::{InitChoice, PipelineParams};

/// Where the score matrix comes from: exactly one source.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputSource {
    Csv { path: PathBuf, encoding: Encoding },
    Synthetic(SyntheticSpec),
}

/// Estimator hyperparameters as configured (epoch counts for the proxy and
/// the final model are separate).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub learning_rate: f64,
    pub proxy_epochs: usize,
    pub final_epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub loss: LossKind,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            learning_rate: 6e-4,
            proxy_epochs: 50,
            final_epochs: 500,
            batch_size: 256,
            hidden: 256,
            loss: LossKind::L2Norm,
        }
    }
}

fn default_k() -> usize {
    10
}

fn default_rounds() -> usize {
    10
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_clusters() -> usize {
    5
}

/// The single configuration document every subcommand reads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input: InputSource,
    pub split: SplitSpec,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub init: InitChoice,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub linear_proxy: bool,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default)]
    pub skip_refinement: bool,
    /// Cluster count for the sparsity analysis command.
    #[serde(default = "default_clusters")]
    pub clusters: usize,
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: PipelineConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if let InputSource::Synthetic(spec) = &self.input {
            if spec.c > spec.n {
                return Err(Error::InvalidArgument(format!(
                    "synthetic c = {} must not exceed n = {}",
                    spec.c, spec.n
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization of this config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn pipeline_params(&self) -> PipelineParams {
        PipelineParams {
            k: self.k,
            rounds: self.rounds,
            init: self.init,
            proxy_epochs: self.predictor.proxy_epochs,
            final_epochs: self.predictor.final_epochs,
            learning_rate: self.predictor.learning_rate,
            batch_size: self.predictor.batch_size,
            hidden: self.predictor.hidden,
            loss: self.predictor.loss,
            seed: self.seed,
            linear_proxy: self.linear_proxy,
            warm_start: self.warm_start,
            skip_refinement: self.skip_refinement,
        }
    }
}
