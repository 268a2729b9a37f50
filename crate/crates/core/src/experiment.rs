//! End-to-end runs shared by the command-line tool and the acceptance
//! suite: synthetic corpora, split + normalization, three-stage training,
//! held-out evaluation and the files a run leaves behind.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{split_indices, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, Evaluation, MetricsReport};
use crate::model::{MoeModel, Utilization};
use crate::synthgen::{generate_dataset, label_with_raters, GroundTruth, RaterPool};
use crate::train::{
    grad_check, run_full_pipeline, CheckSample, DatasetRole, GradCheckReport, PipelineData,
    PipelineOutcome, StageReport, StopReason,
};

/// A generated corpus labeled twice: once by the training rater pool and
/// once by the disjoint test pool.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub truth: GroundTruth,
    pub train_pool: Dataset,
    pub test_pool: Dataset,
}

pub fn synthesize(cfg: &RunConfig) -> Result<SyntheticCorpus> {
    let synth = cfg.synth_config();
    let (data, truth) = generate_dataset(&synth)?;
    Ok(SyntheticCorpus {
        train_pool: label_with_raters(&data, &truth, &synth, RaterPool::Train)?,
        test_pool: label_with_raters(&data, &truth, &synth, RaterPool::Test)?,
        truth,
    })
}

/// Utterance ids of each split part.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: SplitIds,
    pub normalizer: Option<Normalizer>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn normalize(normalizer: Option<&Normalizer>, data: Dataset) -> Result<Dataset> {
    match normalizer {
        Some(n) => n.apply(&data),
        None => Ok(data),
    }
}

/// The samples of `data` named by `ids`, in that order.
pub fn select(data: &Dataset, ids: &[String]) -> Result<Dataset> {
    let index: HashMap<&str, usize> = data
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| (s.utt_id.as_str(), i))
        .collect();
    let rows = ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Sample {
                    utt_id: id.clone(),
                    reason: "not present in the dataset".into(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(data.subset(&rows))
}

/// Stratified split with the run's split stream, then (optionally)
/// standardization fitted on the training part.
pub fn prepare(cfg: &RunConfig, data: &Dataset) -> Result<PreparedData> {
    let parts = split_indices(data, cfg.split, cfg.split_seed())?;
    let ids = |rows: &[usize]| -> Vec<String> {
        rows.iter()
            .map(|&i| data.samples()[i].utt_id.clone())
            .collect()
    };
    let split = SplitIds {
        train: ids(&parts.train),
        val: ids(&parts.val),
        test: ids(&parts.test),
    };
    let train = data.subset(&parts.train);
    let normalizer = if cfg.data.normalize {
        Some(Normalizer::fit(&train)?)
    } else {
        None
    };
    Ok(PreparedData {
        train: normalize(normalizer.as_ref(), train)?,
        val: normalize(normalizer.as_ref(), data.subset(&parts.val))?,
        test: normalize(normalizer.as_ref(), data.subset(&parts.test))?,
        split,
        normalizer,
    })
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    /// Fully resolved configuration of the run.
    pub config: RunConfig,
    pub prepared: PreparedData,
    pub outcome: PipelineOutcome,
    /// Held-out evaluation of the final model.
    pub test: Evaluation,
}

impl TrainedRun {
    pub fn model(&self) -> &MoeModel {
        &self.outcome.model
    }
}

fn check_compatible(cfg: &RunConfig, data: &Dataset, what: &str) -> Result<()> {
    if data.dim() != cfg.model.input_dim {
        return Err(Error::Config(format!(
            "{what} has embedding dimension {}, model.input_dim is {}",
            data.dim(),
            cfg.model.input_dim
        )));
    }
    if data.n_classes() != cfg.model.n_classes {
        return Err(Error::Config(format!(
            "{what} has {} systems, model.n_classes is {}",
            data.n_classes(),
            cfg.model.n_classes
        )));
    }
    Ok(())
}

/// Split, normalize, train all three stages and evaluate on the test part.
/// `auxiliary` feeds stages configured with the auxiliary role; it is split
/// with the same stream and normalized with the target statistics.
pub fn train_run(
    cfg: &RunConfig,
    data: &Dataset,
    auxiliary: Option<&Dataset>,
) -> Result<TrainedRun> {
    cfg.validate()?;
    check_compatible(cfg, data, "training data")?;
    if !data.is_labeled() {
        return Err(Error::InvalidArgument(
            "training data needs a mos label on every sample".into(),
        ));
    }
    let prepared = prepare(cfg, data)?;
    let aux = match auxiliary {
        Some(a) => {
            check_compatible(cfg, a, "auxiliary data")?;
            let parts = split_indices(a, cfg.split, cfg.split_seed())?;
            let n = prepared.normalizer.as_ref();
            Some((
                normalize(n, a.subset(&parts.train))?,
                normalize(n, a.subset(&parts.val))?,
            ))
        }
        None => None,
    };
    if cfg
        .stages()
        .iter()
        .any(|s| s.dataset_role == DatasetRole::Auxiliary)
        && aux.is_none()
    {
        return Err(Error::Config(
            "a stage uses the auxiliary dataset but none was loaded".into(),
        ));
    }

    let model = MoeModel::init(&cfg.model, &cfg.model_rng())?;
    let outcome = run_full_pipeline(
        &model,
        PipelineData {
            train: &prepared.train,
            val: &prepared.val,
            auxiliary: aux.as_ref().map(|(t, v)| (t, v)),
        },
        &cfg.stages(),
        &cfg.loss,
        &cfg.optimizer,
        &cfg.train_rng(),
    )?;
    let test = evaluate_model(&outcome.model, &prepared.test)?;
    Ok(TrainedRun {
        config: cfg.resolved(),
        prepared,
        outcome,
        test,
    })
}

/// Loads the configured manifest(s), or synthesizes training-pool data.
pub fn load_training_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let main = match &cfg.data.manifest {
        Some(path) => crate::dataset::load_manifest(path, true)?,
        None => synthesize(cfg)?.train_pool,
    };
    let aux = match &cfg.data.auxiliary_manifest {
        Some(path) => Some(crate::dataset::load_manifest(path, false)?),
        None => None,
    };
    Ok((main, aux))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u8,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_validation_loss: Option<f64>,
    pub stop_reason: StopReason,
    pub final_utilization: Option<Utilization>,
}

impl From<&StageReport> for StageSummary {
    fn from(r: &StageReport) -> Self {
        Self {
            stage: r.stage,
            epochs_run: r.epochs_run,
            best_epoch: r.best_epoch,
            best_validation_loss: r.best_validation_loss,
            stop_reason: r.stop_reason,
            final_utilization: r.epochs.last().map(|e| e.utilization.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub samples: usize,
    pub utterance: MetricsReport,
    pub system: MetricsReport,
    pub accuracy: f64,
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub split_sizes: [usize; 3],
    pub stages: Vec<StageSummary>,
    pub test: TestSummary,
}

impl RunSummary {
    pub fn of(run: &TrainedRun) -> Self {
        Self {
            config: run.config.clone(),
            split_sizes: [
                run.prepared.train.len(),
                run.prepared.val.len(),
                run.prepared.test.len(),
            ],
            stages: run.outcome.stages.iter().map(StageSummary::from).collect(),
            test: TestSummary {
                samples: run.prepared.test.len(),
                utterance: run.test.utterance.clone(),
                system: run.test.system.clone(),
                accuracy: run.test.accuracy,
            },
        }
    }
}

pub const MODEL_FILE: &str = "model.moem";
pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const SPLIT_FILE: &str = "split.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const STEP_LOG_FILE: &str = "steps.csv";

pub fn stage_checkpoint_name(stage: u8) -> String {
    format!("stage{stage}_best.moem")
}

/// One row per epoch with the training loss breakdown.
pub fn train_log_csv(stages: &[StageReport]) -> String {
    let mut out =
        String::from("stage,epoch,alpha,beta,total,mos,classification,diversity,sparsity\n");
    for e in stages.iter().flat_map(|s| &s.epochs) {
        let t = &e.train;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.stage,
            e.epoch + 1,
            e.alpha,
            e.beta,
            t.total,
            t.mos,
            t.classification,
            t.diversity,
            t.sparsity
        );
    }
    out
}

/// One row per optimizer step.
pub fn step_log_csv(stages: &[StageReport]) -> String {
    let mut out = String::from("stage,epoch,step,lr,grad_norm,clipped_norm\n");
    for s in stages {
        for r in &s.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.stage,
                r.epoch + 1,
                r.step,
                r.lr,
                r.grad_norm,
                r.clipped_norm
            );
        }
    }
    out
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, pretty(value)?)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes the final and per-stage checkpoints, the normalizer, the split,
/// both logs, the resolved config and the summary into `dir`.
pub fn write_run(dir: &Path, run: &TrainedRun) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        write_file(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put(MODEL_FILE, run.model().to_bytes())?;
    for (report, model) in run.outcome.stages.iter().zip(&run.outcome.stage_models) {
        put(&stage_checkpoint_name(report.stage), model.to_bytes())?;
    }
    put(
        TRAIN_LOG_FILE,
        train_log_csv(&run.outcome.stages).into_bytes(),
    )?;
    put(
        STEP_LOG_FILE,
        step_log_csv(&run.outcome.stages).into_bytes(),
    )?;
    put(CONFIG_FILE, run.config.to_toml_string()?.into_bytes())?;
    if let Some(n) = &run.prepared.normalizer {
        put(NORMALIZER_FILE, pretty(n)?)?;
    }
    put(SPLIT_FILE, pretty(&run.prepared.split)?)?;
    put(SUMMARY_FILE, pretty(&RunSummary::of(run))?)?;
    Ok(written)
}

/// What `evaluate` needs from a finished run directory.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub model: MoeModel,
    pub normalizer: Option<Normalizer>,
    pub split: SplitIds,
}

pub fn load_run(dir: &Path) -> Result<RunArtifacts> {
    let normalizer_path = dir.join(NORMALIZER_FILE);
    Ok(RunArtifacts {
        model: MoeModel::load(&dir.join(MODEL_FILE))?,
        normalizer: if normalizer_path.exists() {
            Some(read_json(&normalizer_path)?)
        } else {
            None
        },
        split: read_json(&dir.join(SPLIT_FILE))?,
    })
}

/// Which samples of a dataset to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
    Test,
    All,
}

/// Evaluates a run's model on `subset` of `data` (selected by utterance id
/// through the run's split) after the run's normalization.
pub fn evaluate_run(run: &RunArtifacts, data: &Dataset, subset: Subset) -> Result<Evaluation> {
    let chosen = match subset {
        Subset::Train => select(data, &run.split.train)?,
        Subset::Val => select(data, &run.split.val)?,
        Subset::Test => select(data, &run.split.test)?,
        Subset::All => data.clone(),
    };
    evaluate_model(&run.model, &normalize(run.normalizer.as_ref(), chosen)?)
}

/// Number of training samples in the batch `grad_check_run` checks.
pub const GRAD_CHECK_BATCH: usize = 16;

/// Gradient check of a freshly initialized model from `cfg` on the first
/// training samples of the prepared synthetic (or configured) data.
pub fn grad_check_run(cfg: &RunConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let (data, _) = load_training_data(cfg)?;
    check_compatible(cfg, &data, "training data")?;
    let prepared = prepare(cfg, &data)?;
    let n = GRAD_CHECK_BATCH.min(prepared.train.len());
    let rows: Vec<usize> = (0..n).collect();
    let batch = CheckSample::from_dataset(&prepared.train, &rows);
    let model = MoeModel::init(&cfg.model, &cfg.model_rng())?;
    grad_check(&model, &batch, &cfg.loss, &cfg.grad_check_rng())
}
