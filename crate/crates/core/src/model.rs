//! Mixture-of-experts multi-task head.
//!
//! A softmax gate `g(x) = softmax(W_g·x + b_g)` weights `N` expert MLPs
//! that share a structure but not parameters. Expert outputs (width `H`) are
//! mixed as `Σ g_i(x)·E_i(x)` and the mixed representation feeds two heads:
//! a scalar MOS regressor and a system classifier.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{
    dot, dropout_mask, relu_backward, softmax_backward, softmax_unchecked, Affine, ParamTensor,
    RngState,
};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MOEM";
pub const CHECKPOINT_VERSION: u32 = 1;

const GATE_STREAM: u64 = 1;
const EXPERT_STREAM_BASE: u64 = 1000;
const MOS_HEAD_STREAM: u64 = 2;
const CLS_HEAD_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub input_dim: usize,
    pub expert_hidden: Vec<usize>,
    pub expert_out_dim: usize,
    pub dropout_rate: f64,
    pub n_classes: usize,
    /// Optional ReLU hidden layer in the gate; `None` keeps the gate a
    /// single affine map.
    pub gate_hidden: Option<usize>,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            input_dim: 64,
            expert_hidden: vec![256, 128],
            expert_out_dim: 64,
            dropout_rate: 0.1,
            n_classes: 4,
            gate_hidden: None,
        }
    }
}

impl MoeConfig {
    /// Full validation: experts have two or three hidden layers.
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.expert_hidden.len()) {
            return Err(Error::Config(format!(
                "model: expert_hidden must list 2 or 3 layer widths, got {:?}",
                self.expert_hidden
            )));
        }
        self.validate_shapes()
    }

    /// Validation without the hidden-depth rule, for reduced models
    /// (zero or one hidden layer) used in verification.
    pub fn validate_shapes(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("model: {msg}")));
        if self.n_experts < 2 {
            return bad(format!(
                "n_experts must be at least 2, got {}",
                self.n_experts
            ));
        }
        if self.n_classes < 2 {
            return bad(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            ));
        }
        if self.input_dim == 0 || self.expert_out_dim == 0 {
            return bad("input_dim and expert_out_dim must be positive".into());
        }
        if self.expert_hidden.contains(&0) || self.gate_hidden == Some(0) {
            return bad("layer widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One expert: `D → hidden… → H`, ReLU and dropout after each hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub layers: Vec<Affine>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub hidden: Option<Affine>,
    pub out: Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    config: MoeConfig,
    pub gate: Gate,
    pub experts: Vec<Expert>,
    pub mos_head: Affine,
    pub cls_head: Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// MOS prediction; clamped to `[1, 5]` in eval mode.
    pub mos_pred: f64,
    /// Unclamped MOS head output, what the training loss sees.
    pub mos_raw: f64,
    pub class_logits: Vec<f64>,
    pub gate_weights: Vec<f64>,
    pub mixed_repr: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub output: ForwardOutput,
    input: Vec<f64>,
    gate_hidden_pre: Option<Vec<f64>>,
    gate_hidden_act: Option<Vec<f64>>,
    experts: Vec<ExpertTrace>,
}

#[derive(Clone, Debug)]
struct ExpertTrace {
    /// Input of every layer; `inputs[0]` is the model input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
    output: Vec<f64>,
}

impl Expert {
    fn init(cfg: &MoeConfig, rng: &mut RngState) -> Self {
        let mut widths = vec![cfg.input_dim];
        widths.extend_from_slice(&cfg.expert_hidden);
        widths.push(cfg.expert_out_dim);
        let layers = widths
            .windows(2)
            .map(|w| Affine::glorot(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    fn forward(&self, x: &[f64], mode: Mode, dropout: f64, rng: &mut RngState) -> ExpertTrace {
        let n_hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(n_hidden);
        let mut masks = Vec::with_capacity(n_hidden);
        let mut h = x.to_vec();
        for layer in &self.layers[..n_hidden] {
            let a = layer.forward(&h);
            let mut next: Vec<f64> = a.iter().map(|&v| v.max(0.0)).collect();
            let mask = match mode {
                Mode::Train if dropout > 0.0 => {
                    let m = dropout_mask(next.len(), dropout, rng).expect("rate validated");
                    next.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(a);
            masks.push(mask);
        }
        let output = self.layers[n_hidden].forward(&h);
        inputs.push(h);
        ExpertTrace {
            inputs,
            pre,
            masks,
            output,
        }
    }

    fn backward(&mut self, trace: &ExpertTrace, d_out: &[f64]) {
        let mut upstream = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let dx = self.layers[l].backward(&trace.inputs[l], &upstream, l > 0);
            if l == 0 {
                break;
            }
            let mut d = dx.expect("requested");
            if let Some(mask) = &trace.masks[l - 1] {
                d.iter_mut().zip(mask).for_each(|(v, k)| *v *= k);
            }
            upstream = relu_backward(&trace.pre[l - 1], &d);
        }
    }
}

impl MoeModel {
    /// Glorot-uniform weights and zero biases. Gate, each expert and each
    /// head draw from their own sub-stream of `rng`.
    pub fn init(cfg: &MoeConfig, rng: &RngState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::init_unchecked(cfg, rng))
    }

    /// [`MoeModel::init`] for reduced models that only need
    /// [`MoeConfig::validate_shapes`].
    pub fn init_reduced(cfg: &MoeConfig, rng: &RngState) -> Result<Self> {
        cfg.validate_shapes()?;
        Ok(Self::init_unchecked(cfg, rng))
    }

    fn init_unchecked(cfg: &MoeConfig, rng: &RngState) -> Self {
        let mut gate_rng = rng.fork(GATE_STREAM);
        let (hidden, gate_in) = match cfg.gate_hidden {
            Some(w) => (Some(Affine::glorot(cfg.input_dim, w, &mut gate_rng)), w),
            None => (None, cfg.input_dim),
        };
        let gate = Gate {
            hidden,
            out: Affine::glorot(gate_in, cfg.n_experts, &mut gate_rng),
        };
        let experts = (0..cfg.n_experts)
            .map(|i| Expert::init(cfg, &mut rng.fork(EXPERT_STREAM_BASE + i as u64)))
            .collect();
        Self {
            config: cfg.clone(),
            gate,
            experts,
            mos_head: Affine::glorot(cfg.expert_out_dim, 1, &mut rng.fork(MOS_HEAD_STREAM)),
            cls_head: Affine::glorot(
                cfg.expert_out_dim,
                cfg.n_classes,
                &mut rng.fork(CLS_HEAD_STREAM),
            ),
        }
    }

    pub fn config(&self) -> &MoeConfig {
        &self.config
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::dims(
                "model input",
                &[x.len()],
                &[self.config.input_dim],
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(())
    }

    fn gate_trace(&self, x: &[f64]) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
        match &self.gate.hidden {
            Some(hidden) => {
                let pre = hidden.forward(x);
                let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
                let g = softmax_unchecked(&self.gate.out.forward(&act));
                (Some(pre), Some(act), g)
            }
            None => (None, None, softmax_unchecked(&self.gate.out.forward(x))),
        }
    }

    /// Expert weights for `x`, a probability vector of length `N`.
    pub fn gate_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.gate_trace(x).2)
    }

    /// Output of expert `index` (width `H`). Dropout is applied only in
    /// train mode, so in eval mode `rng` is untouched.
    pub fn expert_forward(
        &self,
        index: usize,
        x: &[f64],
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<Vec<f64>> {
        let expert = self.experts.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "expert index {index} out of range for {} experts",
                self.experts.len()
            ))
        })?;
        self.check_input(x)?;
        Ok(expert
            .forward(x, mode, self.config.dropout_rate, rng)
            .output)
    }

    pub fn moe_forward(&self, x: &[f64], mode: Mode, rng: &mut RngState) -> Result<ForwardOutput> {
        Ok(self.forward_traced(x, mode, rng)?.output)
    }

    pub fn forward_traced(
        &self,
        x: &[f64],
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let (gate_hidden_pre, gate_hidden_act, gate_weights) = self.gate_trace(x);
        let experts: Vec<ExpertTrace> = self
            .experts
            .iter()
            .map(|e| e.forward(x, mode, self.config.dropout_rate, rng))
            .collect();
        let mut mixed_repr = vec![0.0; self.config.expert_out_dim];
        for (g, e) in gate_weights.iter().zip(&experts) {
            for (m, v) in mixed_repr.iter_mut().zip(&e.output) {
                *m += g * v;
            }
        }
        let mos_raw = self.mos_head.forward(&mixed_repr)[0];
        let mos_pred = match mode {
            Mode::Train => mos_raw,
            Mode::Eval => mos_raw.clamp(1.0, 5.0),
        };
        let class_logits = self.cls_head.forward(&mixed_repr);
        Ok(ForwardTrace {
            output: ForwardOutput {
                mos_pred,
                mos_raw,
                class_logits,
                gate_weights,
                mixed_repr,
            },
            input: x.to_vec(),
            gate_hidden_pre,
            gate_hidden_act,
            experts,
        })
    }

    /// Accumulates parameter gradients for one sample given the loss
    /// gradients w.r.t. the raw MOS output, the class logits and the gate
    /// weights (the latter from regularizers acting on the gate directly).
    pub fn backward(&mut self, trace: &ForwardTrace, d_mos: f64, d_logits: &[f64], d_gate: &[f64]) {
        let out = &trace.output;
        let mut d_mixed = self
            .mos_head
            .backward(&out.mixed_repr, &[d_mos], true)
            .expect("requested");
        let d_cls = self
            .cls_head
            .backward(&out.mixed_repr, d_logits, true)
            .expect("requested");
        d_mixed.iter_mut().zip(&d_cls).for_each(|(a, b)| *a += b);

        let dg: Vec<f64> = trace
            .experts
            .iter()
            .zip(d_gate)
            .map(|(e, extra)| dot(&e.output, &d_mixed) + extra)
            .collect();

        for ((expert, et), &g) in self
            .experts
            .iter_mut()
            .zip(&trace.experts)
            .zip(&out.gate_weights)
        {
            let d_out: Vec<f64> = d_mixed.iter().map(|v| g * v).collect();
            expert.backward(et, &d_out);
        }

        let dz = softmax_backward(&out.gate_weights, &dg);
        match (
            &mut self.gate.hidden,
            &trace.gate_hidden_act,
            &trace.gate_hidden_pre,
        ) {
            (Some(hidden), Some(act), Some(pre)) => {
                let d_act = self.gate.out.backward(act, &dz, true).expect("requested");
                hidden.backward(&trace.input, &relu_backward(pre, &d_act), false);
            }
            _ => {
                self.gate.out.backward(&trace.input, &dz, false);
            }
        }
    }

    /// Every parameter tensor with its name, in checkpoint order: gate,
    /// experts ascending, MOS head, classification head.
    pub fn named_params(&self) -> Vec<(String, &ParamTensor)> {
        let mut layers: Vec<(String, &Affine)> = Vec::new();
        if let Some(h) = &self.gate.hidden {
            layers.push(("gate.hidden".into(), h));
        }
        layers.push(("gate.out".into(), &self.gate.out));
        for (i, e) in self.experts.iter().enumerate() {
            for (l, layer) in e.layers.iter().enumerate() {
                layers.push((format!("expert{i}.layer{l}"), layer));
            }
        }
        layers.push(("mos_head".into(), &self.mos_head));
        layers.push(("cls_head".into(), &self.cls_head));
        layers
            .into_iter()
            .flat_map(|(name, layer)| {
                [
                    (format!("{name}.weight"), &layer.weight),
                    (format!("{name}.bias"), &layer.bias),
                ]
            })
            .collect()
    }

    /// Mutable parameter tensors in the same order as [`named_params`].
    ///
    /// [`named_params`]: MoeModel::named_params
    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = Vec::new();
        if let Some(h) = self.gate.hidden.as_mut() {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out.push(&mut self.gate.out.weight);
        out.push(&mut self.gate.out.bias);
        for e in self.experts.iter_mut() {
            for layer in e.layers.iter_mut() {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out.push(&mut self.mos_head.weight);
        out.push(&mut self.mos_head.bias);
        out.push(&mut self.cls_head.weight);
        out.push(&mut self.cls_head.bias);
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut()
            .into_iter()
            .for_each(ParamTensor::zero_grad);
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, p)| p.is_finite())
    }

    // -----------------------------------------------------------------------
    // Checkpoints
    //
    // Layout (little-endian): magic "MOEM", u32 version, then the config as
    // u32 n_experts, u32 input_dim, u32 hidden count, u32 per hidden width,
    // u32 expert_out_dim, f64 dropout_rate, u32 n_classes, u32 gate_hidden
    // (0 = none); then u32 tensor count and per tensor u32 rank, u32 per dim
    // and f64 values, in `named_params` order.

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let u32s = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u32).to_le_bytes());
        u32s(&mut buf, CHECKPOINT_VERSION as usize);
        u32s(&mut buf, cfg.n_experts);
        u32s(&mut buf, cfg.input_dim);
        u32s(&mut buf, cfg.expert_hidden.len());
        for &w in &cfg.expert_hidden {
            u32s(&mut buf, w);
        }
        u32s(&mut buf, cfg.expert_out_dim);
        buf.extend_from_slice(&cfg.dropout_rate.to_le_bytes());
        u32s(&mut buf, cfg.n_classes);
        u32s(&mut buf, cfg.gate_hidden.unwrap_or(0));
        let params = self.named_params();
        u32s(&mut buf, params.len());
        for (_, p) in params {
            u32s(&mut buf, p.shape().len());
            for &d in p.shape() {
                u32s(&mut buf, d);
            }
            for v in p.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.fail("unknown checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(&format!("unsupported checkpoint version {version}")));
        }
        let n_experts = r.u32()? as usize;
        let input_dim = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        if n_hidden > 64 {
            return Err(r.fail("implausible hidden layer count"));
        }
        let expert_hidden = (0..n_hidden)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let expert_out_dim = r.u32()? as usize;
        let dropout_rate = r.f64()?;
        let n_classes = r.u32()? as usize;
        let gate_hidden = match r.u32()? {
            0 => None,
            w => Some(w as usize),
        };
        let config = MoeConfig {
            n_experts,
            input_dim,
            expert_hidden,
            expert_out_dim,
            dropout_rate,
            n_classes,
            gate_hidden,
        };
        let mut model = Self::init_reduced(&config, &RngState::new(0))?;
        let count = r.u32()? as usize;
        let mut params = model.params_mut();
        if count != params.len() {
            return Err(r.fail(&format!(
                "checkpoint has {count} tensors, config implies {}",
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            if shape != p.shape() {
                return Err(r.fail(&format!(
                    "tensor shape {shape:?} does not match expected {:?}",
                    p.shape()
                )));
            }
            for v in p.values_mut() {
                *v = r.f64()?;
            }
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        drop(params);
        if !model.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn fail(&self, reason: &str) -> Error {
        Error::Format {
            path: "<checkpoint>".into(),
            reason: format!("{reason} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail("unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Expert usage over a batch of gate vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    /// Column means of the gate weights.
    pub mean_weight: Vec<f64>,
    /// Fraction of rows whose largest weight sits at each expert (ties go
    /// to the lowest index).
    pub argmax_frequency: Vec<f64>,
}

impl Utilization {
    pub fn max_frequency(&self) -> f64 {
        self.argmax_frequency.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_frequency(&self) -> f64 {
        self.argmax_frequency.iter().copied().fold(1.0, f64::min)
    }
}

pub fn expert_utilization(gates: &[Vec<f64>]) -> Result<Utilization> {
    let n = gates
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidArgument("expert_utilization of an empty batch".into()))?;
    let mut mean_weight = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for row in gates {
        if row.len() != n {
            return Err(Error::dims("expert_utilization row", &[row.len()], &[n]));
        }
        for (m, v) in mean_weight.iter_mut().zip(row) {
            *m += v;
        }
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        counts[best] += 1;
    }
    let rows = gates.len() as f64;
    mean_weight.iter_mut().for_each(|m| *m /= rows);
    Ok(Utilization {
        mean_weight,
        argmax_frequency: counts.into_iter().map(|c| c as f64 / rows).collect(),
    })
}
