//! Experiment configuration: one TOML file with a section per subsystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drift::DriftPolicy;
use crate::error::{Error, Result};
use crate::models::TaskModel;
use crate::representations::{Metric, RepresentationKind};
use crate::selection::Selector;
use crate::simulation::{DeviceConfig, PopulationConfig, TaskConfig, TraceConfig};
use crate::training::TrainingConfig;

/// Environment variable naming the root directory for run outputs.
pub const OUTPUT_ROOT_ENV: &str = "DRIFTCFL_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    Softmax,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelChoice,
    /// Hidden width of the MLP.
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelChoice::Softmax,
            hidden: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepresentationConfig {
    pub kind: RepresentationKind,
    pub metric: Metric,
    /// Width of the frozen extractor's hidden and output layers.
    pub embedding_hidden: usize,
    pub embedding_dim: usize,
    /// Gradient sketch size; `None` follows the size rule, 0 disables
    /// projection.
    pub sketch_dim: Option<usize>,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self {
            kind: RepresentationKind::LabelHistogram,
            metric: Metric::L1,
            embedding_hidden: 32,
            embedding_dim: 16,
            sketch_dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Run directory; relative paths resolve under the output root.
    pub dir: Option<PathBuf>,
    /// Rounds between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    pub tta_targets: Vec<f64>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            checkpoint_every: 50,
            tta_targets: vec![0.4, 0.5, 0.6, 0.7],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Keep every client in one cluster (the single global model baseline).
    pub single_cluster: bool,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub population: PopulationConfig,
    pub trace: TraceConfig,
    pub policy: DriftPolicy,
    pub training: TrainingConfig,
    pub selector: Selector,
    pub representation: RepresentationConfig,
    pub devices: DeviceConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn task_model(&self) -> TaskModel {
        match self.model.kind {
            ModelChoice::Softmax => TaskModel::Softmax {
                input_dim: self.task.input_dim,
                num_labels: self.task.num_labels,
            },
            ModelChoice::Mlp => TaskModel::Mlp {
                input_dim: self.task.input_dim,
                hidden: self.model.hidden,
                num_labels: self.task.num_labels,
            },
        }
    }

    /// Lists every offending field at once.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.task.validate(&mut errors);
        self.population.validate(&mut errors);
        self.trace.validate(&mut errors);
        self.policy.validate(&mut errors);
        self.training.validate(&mut errors);
        self.selector.validate(&mut errors);
        self.devices.validate(&mut errors);
        if self.model.kind == ModelChoice::Mlp && self.model.hidden == 0 {
            errors.push("model.hidden must be >= 1".into());
        }
        if self.representation.kind == RepresentationKind::Embedding
            && (self.representation.embedding_dim == 0 || self.representation.embedding_hidden == 0)
        {
            errors.push("representation.embedding_dim and embedding_hidden must be >= 1".into());
        }
        if self.output.tta_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            errors.push("output.tta_targets must lie in [0, 1]".into());
        }
        if self.population.num_clients < self.task.num_concepts {
            errors.push("population.num_clients must be >= task.num_concepts".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Run directory: `output.dir`, else the config name, resolved under
    /// the output root.
    pub fn run_dir(&self) -> PathBuf {
        let dir = self.output.dir.clone().unwrap_or_else(|| {
            PathBuf::from(if self.name.is_empty() { "run" } else { &self.name })
        });
        if dir.is_absolute() {
            dir
        } else {
            output_root().join(dir)
        }
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn errors_list_every_field() {
        let text = "[training]\neta = -1.0\nbatch_size = 0\n[policy]\ntau_fraction = -0.5\n";
        match ExperimentConfig::from_toml_str(text) {
            Err(Error::Config(errors)) => {
                assert!(errors.len() >= 3, "{errors:?}");
                assert!(errors.iter().any(|e| e.contains("training.eta")));
                assert!(errors.iter().any(|e| e.contains("tau_fraction")));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[training]\nlearning_rate = 0.1\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
