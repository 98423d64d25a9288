//! Experiment configuration: one JSON document describing the dataset, model,
//! training regime, evaluation protocol, output directory and seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tsrobust::attacks::AttackKind;
use tsrobust::data::{load_jsonl, synth_generate, DatasetBundle};
use tsrobust::evaluation::EvalProtocol;
use tsrobust::model::{reference_blocks, ConvBlockConfig, ModelConfig};
use tsrobust::trainers::TrainConfig;

use crate::error::{CliError, CliResult};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// A dataset file in the JSONL format written by `convert`.
    Jsonl { path: PathBuf },
    /// Generated noisy sinusoids.
    Synthetic {
        num_classes: usize,
        per_class: usize,
        channels: usize,
        length: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub conv_blocks: Vec<ConvBlockConfig>,
    pub use_gnlm: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            conv_blocks: reference_blocks(),
            use_gnlm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
    pub out_dir: PathBuf,
    /// Seeds model initialization, training and evaluation; overrides the
    /// nested `seed` fields.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            dataset: DatasetSource::Jsonl {
                path: PathBuf::from("data/charset.jsonl"),
            },
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
            out_dir: PathBuf::from("runs/default"),
            seed: 42,
        }
    }
}

impl ExperimentConfig {
    /// A small synthetic experiment that trains and evaluates in seconds.
    pub fn synthetic_quickstart() -> Self {
        let mut eval = EvalProtocol::default();
        for spec in &mut eval.attacks {
            match spec.kind {
                AttackKind::Noise => spec.restarts = 20,
                AttackKind::Fgsm => spec.restarts = 10,
                AttackKind::Pgd => {
                    spec.restarts = 2;
                    spec.steps = 20;
                }
                AttackKind::Boundary => spec.steps = 200,
                AttackKind::Simba => {}
            }
        }
        Self {
            dataset: DatasetSource::Synthetic {
                num_classes: 3,
                per_class: 30,
                channels: 3,
                length: 48,
                seed: 7,
            },
            model: ModelSection {
                conv_blocks: vec![
                    ConvBlockConfig { filters: 8, kernel: 5 },
                    ConvBlockConfig { filters: 8, kernel: 5 },
                ],
                use_gnlm: false,
            },
            train: TrainConfig {
                epochs: 40,
                batch_size: 8,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            eval,
            out_dir: PathBuf::from("runs/quickstart"),
            ..Self::default()
        }
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(CliError::Usage(format!(
                "{}: unsupported config format version {}",
                path.display(),
                cfg.format_version
            )));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetSource::Jsonl { path: p } = &mut cfg.dataset {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    /// Pushes the global seed into every nested section and validates.
    pub fn resolved(mut self) -> CliResult<Self> {
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.train.validate()?;
        self.eval.validate()?;
        if self.model.conv_blocks.is_empty() {
            return Err(CliError::Usage("model needs at least one conv block".into()));
        }
        Ok(self)
    }

    pub fn model_config(&self, in_channels: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            num_classes,
            conv_blocks: self.model.conv_blocks.clone(),
            use_gnlm: self.model.use_gnlm,
            seed: self.seed,
        }
    }

    /// The unnormalized dataset.
    pub fn load_dataset(&self) -> CliResult<DatasetBundle> {
        match &self.dataset {
            DatasetSource::Jsonl { path } => Ok(load_jsonl(path)?),
            DatasetSource::Synthetic {
                num_classes,
                per_class,
                channels,
                length,
                seed,
            } => Ok(synth_generate(*num_classes, *per_class, *channels, *length, *seed)),
        }
    }

    /// Hash of everything that determines results; the output directory is
    /// excluded so relocated runs keep their identity.
    pub fn hash(&self) -> String {
        let mut identity = self.clone();
        identity.out_dir = PathBuf::new();
        let canonical = serde_json::to_string(&identity).expect("config serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        back.resolved().unwrap();
    }

    #[test]
    fn quickstart_validates() {
        ExperimentConfig::synthetic_quickstart().resolved().unwrap();
    }

    #[test]
    fn hash_ignores_out_dir_but_not_seed() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn minimal_config_fills_defaults_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"format_version":1,"dataset":{"kind":"jsonl","path":"d.jsonl"},"out_dir":"out","seed":3}"#,
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap().resolved().unwrap();
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.eval.seed, 3);
        assert_eq!(cfg.out_dir, dir.path().join("out"));
        assert_eq!(
            cfg.dataset,
            DatasetSource::Jsonl {
                path: dir.path().join("d.jsonl")
            }
        );
        assert_eq!(cfg.eval.epsilon_grid.len(), 6);
    }

    #[test]
    fn unknown_fields_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"format_version":1,"dataset":{"kind":"jsonl","path":"d"},"out_dir":"o","seed":1,"typo":2}"#,
        )
        .unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(CliError::Usage(_))));
    }
}
