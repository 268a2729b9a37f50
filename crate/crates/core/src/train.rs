//! Three-stage progressive training: AdamW with cosine annealing, global
//! gradient clipping, early stopping on validation loss, and a
//! finite-difference gradient check.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::loss::{loss_with_grads, task_weight_schedule, total_loss, LossBreakdown, LossWeights};
use crate::model::{expert_utilization, ForwardOutput, Mode, MoeModel, Utilization};
use crate::numkernel::{ParamTensor, RngState};

/// Which data a stage trains on. `Auxiliary` needs an auxiliary dataset to
/// be supplied to the pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    #[default]
    Target,
    Auxiliary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub epochs: usize,
    pub lr_max: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub dataset_role: DatasetRole,
}

impl StageConfig {
    /// Defaults: 12/15/10 epochs at 1e-4/5e-5/1e-5, batch 32.
    pub fn default_for(stage: u8) -> Self {
        let (epochs, lr_max) = match stage {
            1 => (12, 1e-4),
            2 => (15, 5e-5),
            _ => (10, 1e-5),
        };
        Self {
            stage,
            epochs,
            lr_max,
            batch_size: 32,
            dataset_role: DatasetRole::Target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let name = format!("stage{}", self.stage);
        if !(1..=3).contains(&self.stage) {
            return Err(Error::Config(format!(
                "stage must be 1, 2 or 3, got {}",
                self.stage
            )));
        }
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return Err(Error::Config(format!(
                "{name}: lr_max must be positive, got {}",
                self.lr_max
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!(
                "{name}: batch_size must be positive"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            patience: 5,
        }
    }
}

impl OptimizerConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("optimizer: {msg}")));
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if self.patience == 0 {
            return bad("patience must be positive".into());
        }
        Ok(())
    }
}

/// AdamW moments and step counter. The moment buffers mirror the parameter
/// list they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, shapes: &[usize]) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(cfg: &OptimizerConfig, model: &MoeModel) -> Self {
        let sizes: Vec<usize> = model.named_params().iter().map(|(_, p)| p.len()).collect();
        Self::new(cfg, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: decoupled decay `p ← p·(1 − lr·wd)`, then the
    /// bias-corrected Adam step. A NaN gradient aborts before any parameter
    /// moves, naming the offending tensor.
    pub fn step(
        &mut self,
        names: &[String],
        params: &mut [&mut ParamTensor],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.first.len() || names.len() != params.len() {
            return Err(Error::dims(
                "adamw parameter list",
                &[params.len(), names.len()],
                &[self.first.len()],
            ));
        }
        for ((p, m), name) in params.iter().zip(&self.first).zip(names) {
            if p.len() != m.len() {
                return Err(Error::dims("adamw moments", p.shape(), &[m.len()]));
            }
            if p.grad().iter().any(|g| g.is_nan()) {
                return Err(Error::NonFinite(format!("gradient of {name} contains NaN")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (values, grads) = p.values_and_grad_mut();
            for (((w, &g), m), v) in values.iter_mut().zip(grads.iter()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = *w * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at the first epoch to `0.01·lr_max` at
/// the last; both endpoints are returned exactly. A single-epoch stage
/// stays at `lr_max`.
pub fn cosine_lr(lr_max: f64, epoch: usize, epochs: usize) -> Result<f64> {
    if epochs == 0 || epoch >= epochs {
        return Err(Error::InvalidArgument(format!(
            "cosine_lr: epoch {epoch} outside a stage of {epochs} epochs"
        )));
    }
    let lr_min = 0.01 * lr_max;
    if epoch == 0 {
        return Ok(lr_max);
    }
    if epoch == epochs - 1 {
        return Ok(lr_min);
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

pub fn global_grad_norm<'a>(params: impl IntoIterator<Item = &'a ParamTensor>) -> f64 {
    params
        .into_iter()
        .flat_map(|p| p.grad().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients onto the `max_norm` ball when their global L2
/// norm exceeds it. Returns the norm before clipping.
pub fn clip_gradients(params: &mut [&mut ParamTensor], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params.iter().map(|p| &**p));
    if norm > max_norm {
        let mut scale = max_norm / norm;
        let mut current = norm;
        // rounding can leave the rescaled norm a few ulps above max_norm
        while current > max_norm {
            for p in params.iter_mut() {
                p.grad_mut().iter_mut().for_each(|g| *g *= scale);
            }
            current = global_grad_norm(params.iter().map(|p| &**p));
            scale = 1.0 - 4.0 * f64::EPSILON;
        }
    }
    norm
}

/// Outcome of one [`EarlyStopping::observe`] call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

/// Patience counter on a loss that must strictly decrease.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    epochs_since_improvement: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            epochs_since_improvement: 0,
            seen: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Observation {
        let epoch = self.seen;
        self.seen += 1;
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        Observation {
            improved,
            stop: self.epochs_since_improvement >= self.patience,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 0-based epoch of the best loss so far.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.epochs_since_improvement
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    /// 0-based within the stage.
    pub epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    /// Sample-weighted mean of the mini-batch losses.
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
    /// Gate usage on the validation set.
    pub utilization: Utilization,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ZeroEpochs,
    Completed,
    EarlyStopped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_validation_loss: Option<f64>,
    pub stop_reason: StopReason,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

/// Mutable state of one stage: optimizer, early stopping and the stage's
/// random stream.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: AdamW,
    pub early_stopping: EarlyStopping,
    pub rng: RngState,
}

fn mos_targets(data: &Dataset) -> Vec<Option<f64>> {
    data.samples().iter().map(|s| s.mos).collect()
}

fn add_scaled(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.total += w * b.total;
    acc.mos += w * b.mos;
    acc.classification += w * b.classification;
    acc.diversity += w * b.diversity;
    acc.sparsity += w * b.sparsity;
}

/// Eval-mode outputs for every sample of `data`.
pub fn predict_all(model: &MoeModel, data: &Dataset) -> Result<Vec<ForwardOutput>> {
    let mut rng = RngState::new(0);
    data.samples()
        .iter()
        .map(|s| model.moe_forward(&s.embedding, Mode::Eval, &mut rng))
        .collect()
}

/// Validation loss (eval mode) and gate utilization.
pub fn validation_loss(
    model: &MoeModel,
    data: &Dataset,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Utilization)> {
    let outputs = predict_all(model, data)?;
    let loss = total_loss(&outputs, &mos_targets(data), &data.class_labels(), weights)?;
    let gates: Vec<Vec<f64>> = outputs.into_iter().map(|o| o.gate_weights).collect();
    Ok((loss, expert_utilization(&gates)?))
}

/// One optimization step on `batch` (indices into `data`). Returns the
/// batch loss and the step record fields `(pre-clip, post-clip)` norms.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut MoeModel,
    state: &mut TrainState,
    data: &Dataset,
    batch: &[usize],
    weights: &LossWeights,
    lr: f64,
    clip_norm: f64,
    (stage, epoch): (u8, usize),
) -> Result<(LossBreakdown, f64, f64)> {
    model.zero_grad();
    let samples = data.samples();
    let traces = batch
        .iter()
        .map(|&i| model.forward_traced(&samples[i].embedding, Mode::Train, &mut state.rng))
        .collect::<Result<Vec<_>>>()?;
    let outputs: Vec<ForwardOutput> = traces.iter().map(|t| t.output.clone()).collect();
    let targets: Vec<Option<f64>> = batch.iter().map(|&i| samples[i].mos).collect();
    let labels: Vec<usize> = batch
        .iter()
        .map(|&i| {
            data.class_index(&samples[i].system_id)
                .expect("vocab covers samples")
        })
        .collect();
    let (loss, grads) = loss_with_grads(&outputs, &targets, &labels, weights)?;
    if !loss.total.is_finite() {
        return Err(Error::Diverged {
            stage,
            epoch: epoch + 1,
            reason: format!("training loss {}", loss.total),
        });
    }
    for (trace, g) in traces.iter().zip(&grads) {
        model.backward(trace, g.d_mos, &g.d_logits, &g.d_gate);
    }
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut params = model.params_mut();
    let norm = clip_gradients(&mut params, clip_norm);
    let clipped = global_grad_norm(params.iter().map(|p| &**p));
    state.optimizer.step(&names, &mut params, lr)?;
    Ok((loss, norm, clipped))
}

/// Trains one stage and returns the best-validation snapshot.
///
/// Each epoch shuffles the training set with a stream forked from `rng`,
/// runs mini-batches in train mode with `(α, β)` from the task schedule and
/// the cosine learning rate, then scores the validation set in eval mode
/// with the stage's final `(α, β)`. Training stops after `patience`
/// consecutive epochs without strict improvement.
pub fn run_stage(
    model: &MoeModel,
    cfg: &StageConfig,
    train: &Dataset,
    val: &Dataset,
    base: &LossWeights,
    opt: &OptimizerConfig,
    rng: &RngState,
) -> Result<(MoeModel, StageReport)> {
    cfg.validate()?;
    opt.validate()?;
    base.validate()?;
    if cfg.epochs == 0 {
        return Ok((
            model.clone(),
            StageReport {
                stage: cfg.stage,
                epochs_run: 0,
                best_epoch: None,
                best_validation_loss: None,
                stop_reason: StopReason::ZeroEpochs,
                epochs: Vec::new(),
                steps: Vec::new(),
            },
        ));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "stage {}: training and validation sets must be nonempty",
            cfg.stage
        )));
    }
    if !val.is_labeled() {
        return Err(Error::InvalidArgument(format!(
            "stage {}: validation set needs mos labels",
            cfg.stage
        )));
    }
    let val_weights = base.with_tasks(task_weight_schedule(cfg.stage, cfg.epochs - 1, cfg.epochs)?);

    let mut current = model.clone();
    let mut best = model.clone();
    let mut state = TrainState {
        optimizer: AdamW::for_model(opt, model),
        early_stopping: EarlyStopping::new(opt.patience),
        rng: rng.clone(),
    };
    let mut report = StageReport {
        stage: cfg.stage,
        epochs_run: 0,
        best_epoch: None,
        best_validation_loss: None,
        stop_reason: StopReason::Completed,
        epochs: Vec::new(),
        steps: Vec::new(),
    };

    for epoch in 0..cfg.epochs {
        let (alpha, beta) = task_weight_schedule(cfg.stage, epoch, cfg.epochs)?;
        let weights = base.with_tasks((alpha, beta));
        let lr = cosine_lr(cfg.lr_max, epoch, cfg.epochs)?;

        state.rng = rng.fork(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        state.rng.shuffle(&mut order);

        let mut train_loss = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let (loss, norm, clipped) = train_step(
                &mut current,
                &mut state,
                train,
                batch,
                &weights,
                lr,
                opt.clip_norm,
                (cfg.stage, epoch),
            )?;
            add_scaled(
                &mut train_loss,
                &loss,
                batch.len() as f64 / train.len() as f64,
            );
            report.steps.push(StepRecord {
                epoch,
                step: state.optimizer.step_count(),
                lr,
                grad_norm: norm,
                clipped_norm: clipped,
            });
        }

        let (val_loss, utilization) = validation_loss(&current, val, &val_weights)?;
        if val_loss.total.is_nan() {
            return Err(Error::Diverged {
                stage: cfg.stage,
                epoch: epoch + 1,
                reason: "validation loss is NaN".into(),
            });
        }
        report.epochs.push(EpochRecord {
            stage: cfg.stage,
            epoch,
            alpha,
            beta,
            lr,
            train: train_loss,
            validation: val_loss,
            utilization,
        });
        report.epochs_run = epoch + 1;
        let obs = state.early_stopping.observe(val_loss.total);
        if obs.improved {
            best = current.clone();
        }
        if obs.stop {
            report.stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    report.best_epoch = state.early_stopping.best_epoch();
    report.best_validation_loss = Some(state.early_stopping.best());
    Ok((best, report))
}

/// Train/validation data for the pipeline. `auxiliary` feeds stages whose
/// role is [`DatasetRole::Auxiliary`].
#[derive(Clone, Copy, Debug)]
pub struct PipelineData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub auxiliary: Option<(&'a Dataset, &'a Dataset)>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub model: MoeModel,
    pub stages: Vec<StageReport>,
    /// Best snapshot after each stage.
    pub stage_models: Vec<MoeModel>,
}

/// Stream tag of stage `s` under the pipeline seed.
const STAGE_STREAM_BASE: u64 = 100;

/// Runs the stages in order, carrying the model forward. Each stage gets a
/// fresh optimizer and its own random stream.
pub fn run_full_pipeline(
    model: &MoeModel,
    data: PipelineData<'_>,
    stages: &[StageConfig],
    base: &LossWeights,
    opt: &OptimizerConfig,
    rng: &RngState,
) -> Result<PipelineOutcome> {
    for (i, s) in stages.iter().enumerate() {
        s.validate()?;
        if s.stage as usize != i + 1 {
            return Err(Error::Config(format!(
                "stage configs must be listed in order 1, 2, 3; position {} has stage {}",
                i + 1,
                s.stage
            )));
        }
        if s.dataset_role == DatasetRole::Auxiliary && data.auxiliary.is_none() {
            return Err(Error::Config(format!(
                "stage{} uses the auxiliary dataset but none was supplied",
                s.stage
            )));
        }
    }
    let mut current = model.clone();
    let mut outcome = PipelineOutcome {
        model: model.clone(),
        stages: Vec::new(),
        stage_models: Vec::new(),
    };
    for s in stages {
        let (train, val) = match (s.dataset_role, data.auxiliary) {
            (DatasetRole::Auxiliary, Some(aux)) => aux,
            _ => (data.train, data.val),
        };
        let stage_rng = rng.fork(STAGE_STREAM_BASE + s.stage as u64);
        let (next, report) = run_stage(&current, s, train, val, base, opt, &stage_rng)?;
        current = next;
        outcome.stages.push(report);
        outcome.stage_models.push(current.clone());
    }
    outcome.model = current;
    Ok(outcome)
}

/// One labeled example for [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct CheckSample {
    pub input: Vec<f64>,
    pub mos: Option<f64>,
    pub class: usize,
}

impl CheckSample {
    pub fn from_dataset(data: &Dataset, indices: &[usize]) -> Vec<Self> {
        let labels = data.class_labels();
        indices
            .iter()
            .map(|&i| CheckSample {
                input: data.samples()[i].embedding.clone(),
                mos: data.samples()[i].mos,
                class: labels[i],
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Worst relative error per tensor, in parameter order.
    pub per_tensor: Vec<(String, f64)>,
    pub entries: Vec<GradCheckEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_MIN_PARAMS: usize = 200;

fn batch_loss(model: &MoeModel, batch: &[CheckSample], weights: &LossWeights) -> Result<f64> {
    let mut rng = RngState::new(0);
    let outputs = batch
        .iter()
        .map(|s| model.moe_forward(&s.input, Mode::Eval, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Option<f64>> = batch.iter().map(|s| s.mos).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.class).collect();
    Ok(total_loss(&outputs, &targets, &labels, weights)?.total)
}

/// Compares the analytic gradient of the total loss with central
/// differences (step 1e-5) on at least 200 parameters drawn from every
/// tensor (all of them for smaller models). Always runs in eval mode, so
/// dropout never perturbs the comparison. Relative error is
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    model: &MoeModel,
    batch: &[CheckSample],
    weights: &LossWeights,
    rng: &RngState,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument(
            "grad_check needs a nonempty batch".into(),
        ));
    }
    weights.validate()?;
    let mut work = model.clone();

    work.zero_grad();
    let mut eval_rng = RngState::new(0);
    let traces = batch
        .iter()
        .map(|s| work.forward_traced(&s.input, Mode::Eval, &mut eval_rng))
        .collect::<Result<Vec<_>>>()?;
    let outputs: Vec<ForwardOutput> = traces.iter().map(|t| t.output.clone()).collect();
    let targets: Vec<Option<f64>> = batch.iter().map(|s| s.mos).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.class).collect();
    let (_, grads) = loss_with_grads(&outputs, &targets, &labels, weights)?;
    for (trace, g) in traces.iter().zip(&grads) {
        work.backward(trace, g.d_mos, &g.d_logits, &g.d_gate);
    }

    let tensors: Vec<(String, Vec<f64>)> = work
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.grad().to_vec()))
        .collect();
    // smallest per-tensor quota reaching the target count
    let total: usize = tensors.iter().map(|(_, g)| g.len()).sum();
    let target = GRAD_CHECK_MIN_PARAMS.min(total);
    let mut per_tensor_quota = target.div_ceil(tensors.len());
    while tensors
        .iter()
        .map(|(_, g)| g.len().min(per_tensor_quota))
        .sum::<usize>()
        < target
    {
        per_tensor_quota += 1;
    }
    let mut pick_rng = rng.fork(0);

    let mut per_tensor = Vec::with_capacity(tensors.len());
    let mut entries = Vec::new();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (t, (name, analytic)) in tensors.iter().enumerate() {
        let mut indices: Vec<usize> = (0..analytic.len()).collect();
        pick_rng.shuffle(&mut indices);
        indices.truncate(per_tensor_quota);
        indices.sort_unstable();
        let mut tensor_worst = 0.0f64;
        for &i in &indices {
            let original = work.params_mut()[t].values()[i];
            work.params_mut()[t].values_mut()[i] = original + GRAD_CHECK_STEP;
            let plus = batch_loss(&work, batch, weights)?;
            work.params_mut()[t].values_mut()[i] = original - GRAD_CHECK_STEP;
            let minus = batch_loss(&work, batch, weights)?;
            work.params_mut()[t].values_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            tensor_worst = tensor_worst.max(err);
            entries.push(GradCheckEntry {
                tensor: name.clone(),
                index: i,
                analytic: a,
                numeric,
                relative_error: err,
            });
            checked += 1;
        }
        worst = worst.max(tensor_worst);
        per_tensor.push((name.clone(), tensor_worst));
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        checked,
        per_tensor,
        entries,
    })
}
