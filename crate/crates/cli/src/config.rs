//! Experiment configuration schema.

use std::path::{Path, PathBuf};

use equireg_core::data::DatasetSpec;
use equireg_core::gmm::GmmSpec;
use equireg_core::groups::GroupAction;
use equireg_core::measure::OperatorSpec;
use equireg_core::mpe::{AutoencoderConfig, MpeRole};
use equireg_core::samplers::{Algorithm, SamplerConfig};
use equireg_core::schedule::ScheduleParams;
use equireg_core::score::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, IoContext, Result};

/// How a score model is obtained for the space a sampler runs in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScoreSpec {
    /// Exact score of a given mixture.
    Analytic { prior: GmmSpec },
    /// Exact score of a mixture fitted to the training data.
    FitGmm {
        components: usize,
        rank: usize,
        #[serde(default = "default_floor")]
        floor: f64,
        #[serde(default = "default_iterations")]
        iterations: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Trained noise-prediction network.
    Denoiser {
        #[serde(default)]
        train: TrainConfig,
        #[serde(default)]
        seed: u64,
    },
}

fn default_floor() -> f64 {
    1e-3
}

fn default_iterations() -> usize {
    25
}

impl ScoreSpec {
    pub fn needs_training(&self) -> bool {
        !matches!(self, ScoreSpec::Analytic { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct MpeSpec {
    pub group: GroupAction,
    #[serde(default)]
    pub role: MpeRole,
    #[serde(default)]
    pub autoencoder: AutoencoderConfig,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TestSpec {
    pub n: usize,
    pub seed: u64,
}

impl Default for TestSpec {
    fn default() -> Self {
        TestSpec { n: 20, seed: 1_000_003 }
    }
}

/// Compare samples against draws from the exact posterior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct OracleSpec {
    pub samples: usize,
    pub projections: usize,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            samples: 500,
            projections: 64,
        }
    }
}

/// Sweep axes; an empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct SweepAxes {
    pub algorithm: Vec<Algorithm>,
    pub lambda: Vec<f64>,
    pub period: Vec<usize>,
    pub steps: Vec<usize>,
    pub mask_size: Vec<usize>,
    /// `[k_meas, k_equi]` pairs.
    pub k_split: Vec<[usize; 2]>,
}

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        self.algorithm.is_empty()
            && self.lambda.is_empty()
            && self.period.is_empty()
            && self.steps.is_empty()
            && self.mask_size.is_empty()
            && self.k_split.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub test: TestSpec,
    #[serde(default)]
    pub schedule: ScheduleParams,
    /// Model for pixel-space samplers.
    #[serde(default)]
    pub score: Option<ScoreSpec>,
    /// Model for latent samplers, fitted on encoded training data.
    #[serde(default)]
    pub latent_score: Option<ScoreSpec>,
    #[serde(default)]
    pub mpe: Option<MpeSpec>,
    pub operator: OperatorSpec,
    pub sigma_y: f64,
    pub sampler: SamplerConfig,
    #[serde(default = "default_samples")]
    pub samples_per_measurement: usize,
    #[serde(default)]
    pub oracle: Option<OracleSpec>,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_samples() -> usize {
    1
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn schema(msg: impl Into<String>) -> HarnessError {
    HarnessError::Schema(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Schema(m) => schema(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical JSON used for hashing.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn algorithms(&self) -> Vec<Algorithm> {
        if self.sweep.algorithm.is_empty() {
            vec![self.sampler.algorithm]
        } else {
            self.sweep.algorithm.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_y >= 0.0) || !self.sigma_y.is_finite() {
            return Err(schema("sigma-y must be finite and non-negative"));
        }
        if self.samples_per_measurement == 0 {
            return Err(schema("samples-per-measurement must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(schema("at least one seed is required"));
        }
        if self.test.n == 0 {
            return Err(schema("test set must not be empty"));
        }
        self.sampler.validate().map_err(|e| schema(e.to_string()))?;
        let algs = self.algorithms();
        if algs.iter().any(|a| !a.needs_measurement()) {
            return Err(schema("experiments run measurement-conditioned samplers only"));
        }
        if algs.iter().any(|a| a.is_latent()) {
            if self.latent_score.is_none() {
                return Err(schema("latent samplers need `latent-score`"));
            }
            if self.mpe.is_none() {
                return Err(schema("latent samplers need an autoencoder (`mpe`)"));
            }
        }
        if algs.iter().any(|a| !a.is_latent()) && self.score.is_none() {
            return Err(schema("pixel samplers need `score`"));
        }
        let regularized = self.sampler.equi.lambda > 0.0 || self.sweep.lambda.iter().any(|l| *l > 0.0);
        if regularized && self.mpe.is_none() {
            return Err(schema("a positive lambda needs an MPE function (`mpe`)"));
        }
        if !self.sweep.mask_size.is_empty() && !matches!(self.operator, OperatorSpec::BoxInpaint { .. }) {
            return Err(schema("mask-size sweeps need a box-inpaint operator"));
        }
        if self.sweep.lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(schema("lambda values must be finite and non-negative"));
        }
        if self.sweep.period.contains(&0) || self.sweep.steps.contains(&0) {
            return Err(schema("period and steps must be positive"));
        }
        if let Some(o) = &self.oracle {
            if o.samples == 0 || o.projections == 0 {
                return Err(schema("oracle needs samples and projections"));
            }
            if !matches!(self.score, Some(ScoreSpec::Analytic { .. }) | Some(ScoreSpec::FitGmm { .. })) {
                return Err(schema("oracle comparison needs a mixture score model"));
            }
        }
        Ok(())
    }

    /// `--out`, then the config, then `$EQUIREG_OUT/<name>`, then `runs/<name>`.
    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        if let Some(p) = cli {
            return p.to_path_buf();
        }
        if let Some(p) = &self.out {
            return p.clone();
        }
        match std::env::var_os("EQUIREG_OUT") {
            Some(root) => PathBuf::from(root).join(&self.name),
            None => PathBuf::from("runs").join(&self.name),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"kind": "ring-manifold", "d": 2, "radius": 1.0, "thickness": 0.05, "n": 10},
        "score": {"kind": "fit-gmm", "components": 2, "rank": 1},
        "operator": {"kind": "select", "indices": [0]},
        "sigma-y": 0.05,
        "sampler": {"algorithm": "dps", "steps": 10}
    }"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.sampler.steps, 10);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"sigma-y\"", "\"sigmay\": 1, \"sigma-y\"");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(HarnessError::Schema(_))));
        let nested = MINIMAL.replace("\"steps\": 10", "\"steps\": 10, \"stepz\": 3");
        assert!(ExperimentConfig::from_json(&nested).is_err());
    }

    #[test]
    fn regularizer_requires_mpe() {
        let bad = MINIMAL.replace("\"steps\": 10", "\"steps\": 10, \"equi\": {\"lambda\": 0.1}");
        assert!(ExperimentConfig::from_json(&bad).is_err());
    }
}
