//! Run configuration: one TOML file covering data generation, model, loss,
//! split, the three training stages and the optimizer. Unknown keys are
//! rejected and every section is validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SplitFractions;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::MoeConfig;
use crate::numkernel::RngState;
use crate::synthgen::SynthConfig;
use crate::train::{DatasetRole, OptimizerConfig, StageConfig};

/// One `[stageN]` table. Missing keys take that stage's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_role: Option<DatasetRole>,
}

impl StageSection {
    pub fn resolve(&self, stage: u8) -> StageConfig {
        let d = StageConfig::default_for(stage);
        StageConfig {
            stage,
            epochs: self.epochs.unwrap_or(d.epochs),
            lr_max: self.lr_max.unwrap_or(d.lr_max),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            dataset_role: self.dataset_role.unwrap_or(d.dataset_role),
        }
    }

    fn explicit(cfg: &StageConfig) -> Self {
        Self {
            epochs: Some(cfg.epochs),
            lr_max: Some(cfg.lr_max),
            batch_size: Some(cfg.batch_size),
            dataset_role: Some(cfg.dataset_role),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Labeled manifest to train on; synthetic data from `[synth]` when
    /// absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Manifest for stages whose `dataset_role` is `auxiliary`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auxiliary_manifest: Option<PathBuf>,
    /// Standardize embeddings with statistics of the training split.
    pub normalize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: None,
            auxiliary_manifest: None,
            normalize: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in a run.
    #[serde(default)]
    pub seed: u64,
    /// Output directory (overridable with `--out`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub model: MoeConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub stage1: StageSection,
    #[serde(default)]
    pub stage2: StageSection,
    #[serde(default)]
    pub stage3: StageSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

// Sub-streams of the run seed.
const SPLIT_STREAM: u64 = 11;
const MODEL_STREAM: u64 = 12;
const TRAIN_STREAM: u64 = 13;
const GRAD_CHECK_STREAM: u64 = 14;

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The configuration with every default spelled out, suitable for
    /// re-running the same experiment.
    pub fn resolved(&self) -> Self {
        let stages = self.stages();
        Self {
            synth: self.synth_config(),
            stage1: StageSection::explicit(&stages[0]),
            stage2: StageSection::explicit(&stages[1]),
            stage3: StageSection::explicit(&stages[2]),
            ..self.clone()
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.synth.seed != 0 && self.synth.seed != self.seed {
            return Err(Error::Config(
                "synth.seed differs from the run seed; set `seed` at the top level".into(),
            ));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.split
            .validate()
            .map_err(|e| Error::Config(format!("split: {e}")))?;
        for s in self.stages() {
            s.validate()?;
            if s.dataset_role == DatasetRole::Auxiliary && self.data.auxiliary_manifest.is_none() {
                return Err(Error::Config(format!(
                    "stage{} uses the auxiliary dataset but data.auxiliary_manifest is unset",
                    s.stage
                )));
            }
        }
        self.optimizer.validate()?;
        if self.data.manifest.is_none() {
            if self.model.input_dim != self.synth.dim {
                return Err(Error::Config(format!(
                    "model.input_dim {} must equal synth.dim {}",
                    self.model.input_dim, self.synth.dim
                )));
            }
            if self.model.n_classes != self.synth.n_systems {
                return Err(Error::Config(format!(
                    "model.n_classes {} must equal synth.n_systems {}",
                    self.model.n_classes, self.synth.n_systems
                )));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> [StageConfig; 3] {
        [
            self.stage1.resolve(1),
            self.stage2.resolve(2),
            self.stage3.resolve(3),
        ]
    }

    /// `[synth]` with the run seed.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    fn root(&self) -> RngState {
        RngState::new(self.seed)
    }

    pub fn split_seed(&self) -> u64 {
        use rand::RngCore;
        self.root().fork(SPLIT_STREAM).next_u64()
    }

    pub fn model_rng(&self) -> RngState {
        self.root().fork(MODEL_STREAM)
    }

    pub fn train_rng(&self) -> RngState {
        self.root().fork(TRAIN_STREAM)
    }

    pub fn grad_check_rng(&self) -> RngState {
        self.root().fork(GRAD_CHECK_STREAM)
    }
}
