//! Joint multi-task loss.
//!
//! `total = α·L_mos + β·L_cls + γ·(λ1·L_diversity + λ2·L_sparsity)` where
//! `L_mos` is smooth-L1 on the raw MOS output, `L_cls` is label-smoothed
//! cross-entropy on the class logits and the two regularizers act on the
//! gate weights:
//!
//! * sparsity is the mean per-sample gate entropy (low ⇒ confident routing),
//! * diversity is the negated entropy of the batch-mean gate (low ⇒ balanced
//!   expert usage).
//!
//! `α` and `β` follow [`task_weight_schedule`] during training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardOutput;
use crate::numkernel::softmax_unchecked;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Label smoothing strength.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.01,
            lambda1: 1.0,
            lambda2: 1.0,
            epsilon: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss: {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.epsilon >= 1.0 {
            return Err(Error::Config(format!(
                "loss: epsilon must be below 1, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// The same weights with the task pair replaced.
    pub fn with_tasks(self, (alpha, beta): (f64, f64)) -> Self {
        Self {
            alpha,
            beta,
            ..self
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mos: f64,
    pub classification: f64,
    pub diversity: f64,
    pub sparsity: f64,
}

/// Per-sample loss gradients w.r.t. the model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads {
    pub d_mos: f64,
    pub d_logits: Vec<f64>,
    pub d_gate: Vec<f64>,
}

fn smooth_l1_term(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Derivative of the smooth-L1 term w.r.t. the prediction.
pub fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Mean smooth-L1 (transition at `|d| = 1`).
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dims("smooth_l1", &[pred.len()], &[target.len()]));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("smooth_l1 of an empty batch".into()));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| smooth_l1_term(p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

fn log_clamped(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

/// Log-softmax computed with max-subtraction.
fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Mean cross-entropy against `(1 − ε)·onehot + ε/C` targets.
pub fn ce_label_smoothed(logits: &[Vec<f64>], labels: &[usize], eps: f64) -> Result<f64> {
    check_ce_args(logits, labels, eps)?;
    let c = logits[0].len() as f64;
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            log_softmax(z)
                .iter()
                .enumerate()
                .map(|(j, lp)| {
                    let target = if j == y { 1.0 - eps + eps / c } else { eps / c };
                    -target * lp
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / logits.len() as f64)
}

fn check_ce_args(logits: &[Vec<f64>], labels: &[usize], eps: f64) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::dims(
            "ce_label_smoothed",
            &[logits.len()],
            &[labels.len()],
        ));
    }
    if logits.is_empty() {
        return Err(Error::InvalidArgument(
            "cross-entropy of an empty batch".into(),
        ));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing must lie in [0, 1), got {eps}"
        )));
    }
    let c = logits[0].len();
    if let Some(z) = logits.iter().find(|z| z.len() != c) {
        return Err(Error::dims("ce_label_smoothed logits", &[z.len()], &[c]));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidArgument(format!(
            "class label {y} out of range for {c} classes"
        )));
    }
    Ok(())
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// `(diversity, sparsity)` of a batch of gate vectors: diversity is
/// `−H(mean gate)`, sparsity the mean of `H(gate)`.
pub fn gate_regularizers(gates: &[Vec<f64>]) -> Result<(f64, f64)> {
    let mean = mean_gate(gates)?;
    let sparsity = gates.iter().map(|g| entropy(g)).sum::<f64>() / gates.len() as f64;
    Ok((-entropy(&mean), sparsity))
}

fn mean_gate(gates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = gates
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidArgument("gate regularizers of an empty batch".into()))?;
    let mut mean = vec![0.0; n];
    for g in gates {
        if g.len() != n {
            return Err(Error::dims("gate_regularizers row", &[g.len()], &[n]));
        }
        let sum: f64 = g.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || g.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gate row is not a probability vector (sum {sum})"
            )));
        }
        mean.iter_mut().zip(g).for_each(|(m, v)| *m += v);
    }
    let b = gates.len() as f64;
    mean.iter_mut().for_each(|m| *m /= b);
    Ok(mean)
}

/// Loss of a batch. MOS targets may be absent only when `alpha` is zero;
/// the MOS term then averages over the labeled samples (0 if none).
pub fn total_loss(
    outputs: &[ForwardOutput],
    mos_targets: &[Option<f64>],
    class_targets: &[usize],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(loss_and_grads(outputs, mos_targets, class_targets, w, false)?.0)
}

/// [`total_loss`] together with each sample's gradient w.r.t. the raw MOS
/// output, the class logits and the gate weights.
pub fn loss_with_grads(
    outputs: &[ForwardOutput],
    mos_targets: &[Option<f64>],
    class_targets: &[usize],
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<OutputGrads>)> {
    loss_and_grads(outputs, mos_targets, class_targets, w, true)
}

fn loss_and_grads(
    outputs: &[ForwardOutput],
    mos_targets: &[Option<f64>],
    class_targets: &[usize],
    w: &LossWeights,
    want_grads: bool,
) -> Result<(LossBreakdown, Vec<OutputGrads>)> {
    let b = outputs.len();
    if mos_targets.len() != b || class_targets.len() != b {
        return Err(Error::dims(
            "total_loss batch",
            &[b],
            &[mos_targets.len(), class_targets.len()],
        ));
    }
    if w.alpha > 0.0 && mos_targets.iter().any(Option::is_none) {
        return Err(Error::InvalidArgument(
            "MOS targets are required when alpha > 0".into(),
        ));
    }

    let labeled: Vec<(usize, f64)> = mos_targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .collect();
    let mos = if labeled.is_empty() {
        0.0
    } else {
        let pred: Vec<f64> = labeled.iter().map(|&(i, _)| outputs[i].mos_raw).collect();
        let target: Vec<f64> = labeled.iter().map(|&(_, t)| t).collect();
        smooth_l1(&pred, &target)?
    };

    let logits: Vec<Vec<f64>> = outputs.iter().map(|o| o.class_logits.clone()).collect();
    let classification = ce_label_smoothed(&logits, class_targets, w.epsilon)?;

    let gates: Vec<Vec<f64>> = outputs.iter().map(|o| o.gate_weights.clone()).collect();
    let (diversity, sparsity) = gate_regularizers(&gates)?;

    let total = w.alpha * mos
        + w.beta * classification
        + w.gamma * (w.lambda1 * diversity + w.lambda2 * sparsity);
    let breakdown = LossBreakdown {
        total,
        mos,
        classification,
        diversity,
        sparsity,
    };
    if !want_grads {
        return Ok((breakdown, Vec::new()));
    }

    let bf = b as f64;
    let n_labeled = labeled.len().max(1) as f64;
    let mean = mean_gate(&gates)?;
    let log_mean: Vec<f64> = mean.iter().map(|&m| log_clamped(m)).collect();
    let c = logits[0].len() as f64;
    let grads = outputs
        .iter()
        .zip(mos_targets)
        .zip(class_targets)
        .map(|((o, t), &y)| {
            let d_mos = t.map_or(0.0, |t| w.alpha * smooth_l1_grad(o.mos_raw - t) / n_labeled);
            let p = softmax_unchecked(&o.class_logits);
            let d_logits = p
                .iter()
                .enumerate()
                .map(|(j, pj)| {
                    let target = if j == y {
                        1.0 - w.epsilon + w.epsilon / c
                    } else {
                        w.epsilon / c
                    };
                    w.beta * (pj - target) / bf
                })
                .collect();
            let d_gate = o
                .gate_weights
                .iter()
                .zip(&log_mean)
                .map(|(&g, lm)| {
                    let d_div = (lm + 1.0) / bf;
                    let d_sp = -(log_clamped(g) + 1.0) / bf;
                    w.gamma * (w.lambda1 * d_div + w.lambda2 * d_sp)
                })
                .collect();
            OutputGrads {
                d_mos,
                d_logits,
                d_gate,
            }
        })
        .collect();
    Ok((breakdown, grads))
}

/// `(α, β)` for a training stage and epoch.
///
/// Stage 1 trains classification only, `(0, 1)`. Stage 2 moves linearly
/// from `(0.3, 0.7)` at its first epoch to `(0.7, 0.3)` at its last. Stage 3
/// holds `(0.9, 0.1)`.
pub fn task_weight_schedule(stage: u8, epoch: usize, epochs_in_stage: usize) -> Result<(f64, f64)> {
    if epoch >= epochs_in_stage {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside a stage of {epochs_in_stage} epochs"
        )));
    }
    match stage {
        1 => Ok((0.0, 1.0)),
        2 => {
            let t = if epochs_in_stage == 1 {
                0.0
            } else {
                epoch as f64 / (epochs_in_stage - 1) as f64
            };
            // endpoint-exact interpolation
            let (start, end) = ((0.3, 0.7), (0.7, 0.3));
            Ok((
                (1.0 - t) * start.0 + t * end.0,
                (1.0 - t) * start.1 + t * end.1,
            ))
        }
        3 => Ok((0.9, 0.1)),
        other => Err(Error::InvalidArgument(format!(
            "training stage must be 1, 2 or 3, got {other}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn output(mos: f64, logits: Vec<f64>, gates: Vec<f64>) -> ForwardOutput {
        ForwardOutput {
            mos_pred: mos,
            mos_raw: mos,
            class_logits: logits,
            gate_weights: gates,
            mixed_repr: Vec::new(),
        }
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[3.5], &[3.0]).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[5.0], &[3.0]).unwrap(), 1.5);
        assert!(smooth_l1(&[1.0], &[1.0, 2.0]).is_err());
        assert!(smooth_l1(&[], &[]).is_err());
    }

    #[test]
    fn smooth_l1_is_c1_at_transition() {
        let h = 1e-7;
        for x in [1.0, -1.0] {
            let at = smooth_l1_term(x);
            let (below, above) = (smooth_l1_term(x - h), smooth_l1_term(x + h));
            assert!((below - at).abs() < 2e-7 && (above - at).abs() < 2e-7);
            let left = (at - below) / h;
            let right = (above - at) / h;
            assert!((left - right).abs() < 1e-6, "{left} vs {right}");
            assert!((left - x).abs() < 1e-6);
        }
    }

    #[test]
    fn ce_uniform_logits_is_ln_c() {
        for eps in [0.0, 0.1, 0.5] {
            let v = ce_label_smoothed(&[vec![0.7, 0.7]], &[1], eps).unwrap();
            assert!((v - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn ce_hand_values() {
        let logits = vec![vec![0.9f64.ln(), 0.1f64.ln()]];
        let plain = ce_label_smoothed(&logits, &[0], 0.0).unwrap();
        assert!((plain - 0.105361).abs() < 1e-6);
        assert!((plain + 0.9f64.ln()).abs() < 1e-15);
        let smoothed = ce_label_smoothed(&logits, &[0], 0.1).unwrap();
        let expected = 0.95 * -(0.9f64.ln()) + 0.05 * -(0.1f64.ln());
        assert!((smoothed - expected).abs() < 1e-15);
        assert!((smoothed - 0.215221).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_bad_arguments() {
        assert!(ce_label_smoothed(&[vec![0.0, 0.0]], &[2], 0.1).is_err());
        assert!(ce_label_smoothed(&[vec![0.0, 0.0]], &[0], 1.0).is_err());
    }

    #[test]
    fn regularizer_extremes() {
        let (div, sp) = gate_regularizers(&vec![vec![0.25; 4]; 5]).unwrap();
        assert!((sp - 4f64.ln()).abs() < 1e-15 && (div + 4f64.ln()).abs() < 1e-15);

        let (div, sp) = gate_regularizers(&vec![vec![1.0, 0.0, 0.0]; 3]).unwrap();
        assert_eq!((div, sp), (0.0, 0.0));

        let eye = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        let (div, sp) = gate_regularizers(&eye).unwrap();
        assert_eq!(sp, 0.0);
        assert!((div + 3f64.ln()).abs() < 1e-15);

        assert!(gate_regularizers(&[vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn degenerate_weights_isolate_terms() {
        let outs = vec![
            output(3.2, vec![0.1, -0.4, 0.3], vec![0.2, 0.8]),
            output(1.0, vec![1.0, 0.0, -1.0], vec![0.6, 0.4]),
        ];
        let mos = [Some(3.0), Some(2.5)];
        let cls = [2, 0];
        let base = LossWeights::default();
        let only_mos = total_loss(
            &outs,
            &mos,
            &cls,
            &LossWeights {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.0,
                ..base
            },
        )
        .unwrap();
        assert_eq!(only_mos.total, smooth_l1(&[3.2, 1.0], &[3.0, 2.5]).unwrap());
        let only_ce = total_loss(
            &outs,
            &mos,
            &cls,
            &LossWeights {
                alpha: 0.0,
                beta: 1.0,
                gamma: 0.0,
                ..base
            },
        )
        .unwrap();
        let logits: Vec<Vec<f64>> = outs.iter().map(|o| o.class_logits.clone()).collect();
        assert_eq!(
            only_ce.total,
            ce_label_smoothed(&logits, &cls, base.epsilon).unwrap()
        );
    }

    #[test]
    fn missing_mos_targets_need_zero_alpha() {
        let outs = vec![output(3.0, vec![0.0, 1.0], vec![0.5, 0.5])];
        let w = LossWeights::default();
        assert!(total_loss(&outs, &[None], &[1], &w).is_err());
        let b = total_loss(&outs, &[None], &[1], &w.with_tasks((0.0, 1.0))).unwrap();
        assert_eq!(b.mos, 0.0);
    }

    #[test]
    fn output_gradients_match_finite_differences() {
        let outs = vec![
            output(3.7, vec![0.3, -0.2, 0.5], vec![0.1, 0.6, 0.3]),
            output(1.2, vec![-1.0, 0.4, 0.0], vec![0.5, 0.2, 0.3]),
            output(2.9, vec![0.8, 0.8, -0.3], vec![0.25, 0.25, 0.5]),
        ];
        let mos = [Some(2.0), Some(1.9), Some(3.05)];
        let cls = [1, 0, 2];
        let w = LossWeights {
            alpha: 0.6,
            beta: 0.4,
            gamma: 0.3,
            lambda1: 0.7,
            lambda2: 1.3,
            epsilon: 0.1,
        };
        let (_, grads) = loss_with_grads(&outs, &mos, &cls, &w).unwrap();
        let h = 1e-6;
        let f = |o: &[ForwardOutput]| total_loss(o, &mos, &cls, &w).unwrap().total;
        for i in 0..outs.len() {
            let mut p = outs.clone();
            p[i].mos_raw += h;
            let mut m = outs.clone();
            m[i].mos_raw -= h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            assert!((num - grads[i].d_mos).abs() < 1e-8);
            for j in 0..3 {
                let mut p = outs.clone();
                p[i].class_logits[j] += h;
                let mut m = outs.clone();
                m[i].class_logits[j] -= h;
                let num = (f(&p) - f(&m)) / (2.0 * h);
                assert!((num - grads[i].d_logits[j]).abs() < 1e-8);
            }
        }
        // gate gradients are checked in the tangent space of the simplex:
        // move mass from one expert to another
        for i in 0..outs.len() {
            let (a, b) = (0, 2);
            let mut p = outs.clone();
            p[i].gate_weights[a] += h;
            p[i].gate_weights[b] -= h;
            let mut m = outs.clone();
            m[i].gate_weights[a] -= h;
            m[i].gate_weights[b] += h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            let analytic = grads[i].d_gate[a] - grads[i].d_gate[b];
            assert!((num - analytic).abs() < 1e-8, "{num} vs {analytic}");
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(task_weight_schedule(1, 0, 12).unwrap(), (0.0, 1.0));
        assert_eq!(task_weight_schedule(1, 11, 12).unwrap(), (0.0, 1.0));
        assert_eq!(task_weight_schedule(2, 0, 15).unwrap(), (0.3, 0.7));
        assert_eq!(task_weight_schedule(2, 14, 15).unwrap(), (0.7, 0.3));
        let (a, b) = task_weight_schedule(2, 7, 15).unwrap();
        assert!((a - 0.5).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
        for e in 0..10 {
            assert_eq!(task_weight_schedule(3, e, 10).unwrap(), (0.9, 0.1));
        }
        assert!(task_weight_schedule(4, 0, 3).is_err());
        assert!(task_weight_schedule(2, 3, 3).is_err());
    }

    proptest! {
        #[test]
        fn schedule_weights_sum_to_one(stage in 1u8..=3, len in 1usize..40, frac in 0.0f64..1.0) {
            let epoch = ((len as f64) * frac) as usize;
            let (a, b) = task_weight_schedule(stage, epoch.min(len - 1), len).unwrap();
            prop_assert!((a + b - 1.0).abs() <= 1e-15);
            prop_assert!(a >= 0.0 && b >= 0.0);
        }

        #[test]
        fn breakdown_identity_and_bounds(
            raw in prop::collection::vec((1.0f64..5.0, -3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0, -4.0f64..4.0, -4.0f64..4.0, -4.0f64..4.0, 0usize..3, 1.0f64..5.0), 1..12),
            alpha in 0.0f64..2.0, beta in 0.0f64..2.0, gamma in 0.0f64..1.0,
            lambda1 in 0.0f64..2.0, lambda2 in 0.0f64..2.0, epsilon in 0.0f64..0.9,
        ) {
            let outs: Vec<ForwardOutput> = raw.iter().map(|r| output(
                r.0,
                vec![r.1, r.2, r.3],
                softmax_unchecked(&[r.4, r.5, r.6]),
            )).collect();
            let mos: Vec<Option<f64>> = raw.iter().map(|r| Some(r.8)).collect();
            let cls: Vec<usize> = raw.iter().map(|r| r.7).collect();
            let w = LossWeights { alpha, beta, gamma, lambda1, lambda2, epsilon };
            let b = total_loss(&outs, &mos, &cls, &w).unwrap();
            let recomposed = alpha * b.mos + beta * b.classification
                + gamma * (lambda1 * b.diversity + lambda2 * b.sparsity);
            prop_assert!((b.total - recomposed).abs() <= 1e-12);
            let ln_n = 3f64.ln();
            prop_assert!(b.mos >= 0.0 && b.classification >= 0.0);
            prop_assert!(b.sparsity >= 0.0 && b.sparsity <= ln_n + 1e-12);
            prop_assert!(b.diversity <= 0.0 && b.diversity >= -ln_n - 1e-12);
        }
    }
}
