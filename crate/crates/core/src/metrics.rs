//! Utterance- and system-level evaluation: MSE, Pearson (LCC), Spearman
//! (SRCC) and Kendall tau-b (KTAU), competition ranking and rank tables.
//!
//! Correlations of a constant vector are undefined and come back as `None`
//! (`null` in JSON, `n/a` in tables), never as 0.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{Mode, MoeModel};
use crate::numkernel::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Utterance,
    System,
}

impl Level {
    pub fn title(self) -> &'static str {
        match self {
            Level::Utterance => "Utterance-level",
            Level::System => "System-level",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    pub mse: f64,
    pub lcc: Option<f64>,
    pub srcc: Option<f64>,
    pub ktau: Option<f64>,
    /// Number of compared pairs (utterances or systems).
    pub n: usize,
}

pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// Pearson correlation; `None` when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall tau-b via Knight's O(n log n) algorithm: sort by `(x, y)`, count
/// tie groups, and count discordant pairs as merge-sort exchanges on `y`.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = (n * n.saturating_sub(1) / 2) as i64;
    let tie_pairs = |eq: &dyn Fn(usize, usize) -> bool, v: &[(f64, f64)]| -> i64 {
        let mut total = 0i64;
        let mut run = 1i64;
        for i in 1..v.len() {
            if eq(i - 1, i) {
                run += 1;
            } else {
                total += run * (run - 1) / 2;
                run = 1;
            }
        }
        total + run * (run - 1) / 2
    };
    let ties_x = tie_pairs(&|a, b| pairs[a].0 == pairs[b].0, &pairs);
    let ties_xy = tie_pairs(&|a, b| pairs[a] == pairs[b], &pairs);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = merge_count(&mut ys);
    // ys is now sorted
    let ys_pairs: Vec<(f64, f64)> = ys.iter().map(|&v| (v, 0.0)).collect();
    let ties_y = tie_pairs(&|a, b| ys[a] == ys[b], &ys_pairs);

    let numerator = n0 - ties_x - ties_y + ties_xy - 2 * swaps;
    let (d1, d2) = (n0 - ties_x, n0 - ties_y);
    if d1 == 0 || d2 == 0 {
        return None;
    }
    Some(numerator as f64 / ((d1 * d2) as f64).sqrt())
}

/// Sorts `v` ascending and returns the number of inversions.
fn merge_count(v: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            merged.push(v[j]);
            swaps += (mid - i) as i64;
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

fn report(level: Level, pred: &[f64], truth: &[f64]) -> MetricsReport {
    MetricsReport {
        level,
        mse: mse(pred, truth),
        lcc: pearson(pred, truth),
        srcc: spearman(pred, truth),
        ktau: kendall_tau_b(pred, truth),
        n: pred.len(),
    }
}

pub fn utterance_metrics(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::dims(
            "utterance_metrics",
            &[pred.len()],
            &[truth.len()],
        ));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "metrics need at least 2 samples, got {}",
            pred.len()
        )));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric inputs".into()));
    }
    Ok(report(Level::Utterance, pred, truth))
}

/// Metrics on per-system means of predictions and targets.
pub fn system_metrics<S: AsRef<str>>(
    pred: &[f64],
    truth: &[f64],
    system_ids: &[S],
) -> Result<MetricsReport> {
    if pred.len() != truth.len() || pred.len() != system_ids.len() {
        return Err(Error::dims(
            "system_metrics",
            &[pred.len()],
            &[truth.len(), system_ids.len()],
        ));
    }
    let mut groups: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for ((p, t), s) in pred.iter().zip(truth).zip(system_ids) {
        let g = groups.entry(s.as_ref()).or_insert((0.0, 0.0, 0));
        g.0 += p;
        g.1 += t;
        g.2 += 1;
    }
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "system-level metrics need at least 2 systems, got {}",
            groups.len()
        )));
    }
    let (sys_pred, sys_true): (Vec<f64>, Vec<f64>) = groups
        .values()
        .map(|&(p, t, n)| (p / n as f64, t / n as f64))
        .unzip();
    let mut r = utterance_metrics(&sys_pred, &sys_true)?;
    r.level = Level::System;
    Ok(r)
}

/// Standard competition ranking ("1224"): tied values share the best rank
/// of their group and the next distinct value skips by the group size.
pub fn competition_rank(values: &[f64], higher_is_better: bool) -> Vec<usize> {
    let wrapped: Vec<Option<f64>> = values.iter().copied().map(Some).collect();
    competition_rank_opt(&wrapped, higher_is_better)
}

/// [`competition_rank`] where `None` (undefined) ranks below every value.
pub fn competition_rank_opt(values: &[Option<f64>], higher_is_better: bool) -> Vec<usize> {
    let better = |a: Option<f64>, b: Option<f64>| -> bool {
        match (a, b) {
            (Some(a), Some(b)) => {
                if higher_is_better {
                    a > b
                } else {
                    a < b
                }
            }
            (Some(_), None) => true,
            _ => false,
        }
    };
    values
        .iter()
        .map(|&v| 1 + values.iter().filter(|&&o| better(o, v)).count())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub name: String,
    pub report: MetricsReport,
    /// Ranks for MSE, LCC, SRCC, KTAU.
    pub ranks: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub level: Level,
    pub rows: Vec<RankRow>,
}

/// Ranks entries per column: MSE ascending, correlations descending.
pub fn build_rank_table(level: Level, entries: &[(String, MetricsReport)]) -> Result<RankTable> {
    if entries.is_empty() {
        return Err(Error::InvalidArgument(
            "rank table needs at least one entry".into(),
        ));
    }
    let column = |f: &dyn Fn(&MetricsReport) -> Option<f64>, hib: bool| {
        let vals: Vec<Option<f64>> = entries.iter().map(|(_, r)| f(r)).collect();
        competition_rank_opt(&vals, hib)
    };
    let mse = column(&|r| Some(r.mse), false);
    let lcc = column(&|r| r.lcc, true);
    let srcc = column(&|r| r.srcc, true);
    let ktau = column(&|r| r.ktau, true);
    let rows = entries
        .iter()
        .enumerate()
        .map(|(i, (name, r))| RankRow {
            name: name.clone(),
            report: r.clone(),
            ranks: [mse[i], lcc[i], srcc[i], ktau[i]],
        })
        .collect();
    Ok(RankTable { level, rows })
}

/// Three decimals, rounding half to even on the shortest decimal
/// representation of `v` (so 0.9125 → "0.912" and 0.9135 → "0.914").
pub fn format_3dp(v: f64) -> String {
    if !v.is_finite() {
        return "n/a".into();
    }
    let text = format!("{}", v.abs());
    let (int_part, frac_part) = text.split_once('.').unwrap_or((&text, ""));
    let mut digits: Vec<u8> = int_part.bytes().map(|b| b - b'0').collect();
    let int_len = digits.len();
    let frac: Vec<u8> = frac_part.bytes().map(|b| b - b'0').collect();
    digits.extend((0..3).map(|i| frac.get(i).copied().unwrap_or(0)));
    let rest = frac.get(3..).unwrap_or(&[]);
    let round_up = match rest.first() {
        None => false,
        Some(&d) if d > 5 => true,
        Some(&5) => {
            let exact_half = rest[1..].iter().all(|&d| d == 0);
            !exact_half || digits.last().is_some_and(|d| d % 2 == 1)
        }
        Some(_) => false,
    };
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 3;
    let _ = int_len;
    let int_str: String = digits[..split].iter().map(|d| (d + b'0') as char).collect();
    let frac_str: String = digits[split..].iter().map(|d| (d + b'0') as char).collect();
    let negative = v < 0.0 && digits.iter().any(|&d| d != 0);
    format!(
        "{}{}.{}",
        if negative { "-" } else { "" },
        int_str,
        frac_str
    )
}

fn format_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), format_3dp)
}

/// Aligned text table: raw MSE/LCC/SRCC/KTAU then their ranks.
pub fn render_rank_table(table: &RankTable) -> String {
    let name_w = table
        .rows
        .iter()
        .map(|r| r.name.chars().count())
        .max()
        .unwrap_or(0)
        .max(4);
    let mut out = String::new();
    let title = table.level.title();
    let _ = writeln!(
        out,
        "{:name_w$} | {:^31} | {:^23}",
        "",
        format!("{title} (Raw)"),
        format!("{title} (Rank)")
    );
    let _ = writeln!(
        out,
        "{:name_w$} | {:>7} {:>7} {:>7} {:>7} | {:>5} {:>5} {:>5} {:>5}",
        "", "MSE", "LCC", "SRCC", "KTAU", "MSE", "LCC", "SRCC", "KTAU"
    );
    let _ = writeln!(out, "{}", "-".repeat(name_w + 61));
    for row in &table.rows {
        let r = &row.report;
        let _ = writeln!(
            out,
            "{:name_w$} | {:>7} {:>7} {:>7} {:>7} | {:>5} {:>5} {:>5} {:>5}",
            row.name,
            format_3dp(r.mse),
            format_opt(r.lcc),
            format_opt(r.srcc),
            format_opt(r.ktau),
            row.ranks[0],
            row.ranks[1],
            row.ranks[2],
            row.ranks[3],
        );
    }
    out
}

/// Metrics for one model on one labeled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub utterance: MetricsReport,
    pub system: MetricsReport,
    pub accuracy: f64,
    /// Eval-mode (clamped) MOS prediction per sample.
    pub predictions: Vec<f64>,
    /// Predicted class index per sample.
    pub predicted_classes: Vec<usize>,
}

/// Eval-mode forward pass over every sample, both metric levels and
/// classification accuracy against the system labels.
pub fn evaluate_model(model: &MoeModel, data: &Dataset) -> Result<Evaluation> {
    let truth: Vec<f64> = data
        .samples()
        .iter()
        .map(|s| {
            s.mos.ok_or_else(|| Error::Sample {
                utt_id: s.utt_id.clone(),
                reason: "evaluation needs a mos label".into(),
            })
        })
        .collect::<Result<_>>()?;
    let labels = data.class_labels();
    // eval mode never draws from the stream
    let mut rng = RngState::new(0);
    let mut predictions = Vec::with_capacity(data.len());
    let mut predicted_classes = Vec::with_capacity(data.len());
    for s in data.samples() {
        let out = model.moe_forward(&s.embedding, Mode::Eval, &mut rng)?;
        predictions.push(out.mos_pred);
        predicted_classes.push(argmax(&out.class_logits));
    }
    let correct = predicted_classes
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    let systems: Vec<&str> = data
        .samples()
        .iter()
        .map(|s| s.system_id.as_str())
        .collect();
    Ok(Evaluation {
        utterance: utterance_metrics(&predictions, &truth)?,
        system: system_metrics(&predictions, &truth, &systems)?,
        accuracy: correct as f64 / data.len() as f64,
        predictions,
        predicted_classes,
    })
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x.partial_cmp(&bv) == Some(Ordering::Greater) {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// A named report as written by `evaluate` and read by `rank`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDocument {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<MetricsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl ReportDocument {
    pub fn level(&self, level: Level) -> Option<&MetricsReport> {
        match level {
            Level::Utterance => self.utterance.as_ref(),
            Level::System => self.system.as_ref(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Option<f64>, b: f64, tol: f64) -> bool {
        a.is_some_and(|a| (a - b).abs() <= tol)
    }

    /// Tau-b by enumerating every pair.
    fn brute_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
        let (mut p, mut q, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                let dx = x[i].partial_cmp(&x[j]).unwrap();
                let dy = y[i].partial_cmp(&y[j]).unwrap();
                match (dx, dy) {
                    (Ordering::Equal, Ordering::Equal) => {}
                    (Ordering::Equal, _) => tx += 1,
                    (_, Ordering::Equal) => ty += 1,
                    (a, b) if a == b => p += 1,
                    _ => q += 1,
                }
            }
        }
        let (d1, d2) = (p + q + tx, p + q + ty);
        if d1 == 0 || d2 == 0 {
            return None;
        }
        Some((p - q) as f64 / ((d1 * d2) as f64).sqrt())
    }

    #[test]
    fn perfect_prediction() {
        let v = [1.5, 2.0, 4.5, 3.0];
        let r = utterance_metrics(&v, &v).unwrap();
        assert_eq!(r.mse, 0.0);
        assert!(close(r.lcc, 1.0, 1e-12) && close(r.srcc, 1.0, 1e-12));
        assert_eq!(r.ktau, Some(1.0));
    }

    #[test]
    fn mse_arithmetic() {
        // ((1-2)² + (2-4)²)/2
        assert_eq!(
            utterance_metrics(&[1.0, 2.0], &[2.0, 4.0]).unwrap().mse,
            2.5
        );
    }

    #[test]
    fn exact_reversal() {
        let r = utterance_metrics(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!(close(r.lcc, -1.0, 1e-12) && close(r.srcc, -1.0, 1e-12));
        assert_eq!(r.ktau, Some(-1.0));
    }

    #[test]
    fn spearman_with_ties() {
        let r = utterance_metrics(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(close(r.srcc, 1.5 / 3f64.sqrt(), 1e-12));
        assert!(close(r.srcc, 0.866025, 1e-6));
    }

    #[test]
    fn kendall_with_ties() {
        let r = utterance_metrics(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(close(r.ktau, 5.0 / 30f64.sqrt(), 1e-12));
        assert!(close(r.ktau, 0.912871, 1e-6));
    }

    #[test]
    fn constant_input_is_undefined() {
        let r = utterance_metrics(&[3.0, 3.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.lcc, r.srcc, r.ktau), (None, None, None));
        assert_eq!(r.mse, (4.0 + 1.0 + 0.0) / 3.0);
        assert!(utterance_metrics(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn average_rank_examples() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 5.0]),
            vec![2.5, 4.0, 2.5, 1.0]
        );
    }

    #[test]
    fn system_level_means() {
        let ids = ["A", "A", "B", "B"];
        let r = system_metrics(&[3.0, 3.0, 4.0, 4.0], &[3.0, 3.0, 4.0, 4.0], &ids).unwrap();
        assert_eq!(r.mse, 0.0);
        assert!(close(r.srcc, 1.0, 1e-12));
        assert_eq!(r.n, 2);
        assert_eq!(r.level, Level::System);
        assert!(system_metrics(&[1.0, 2.0], &[1.0, 2.0], &["A", "A"]).is_err());
    }

    #[test]
    fn averaging_reduces_error_under_within_system_noise() {
        let mut rng = RngState::new(77);
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        let mut ids = Vec::new();
        for (k, base) in [2.0, 2.8, 3.6, 4.4].iter().enumerate() {
            for _ in 0..100 {
                truth.push(*base);
                pred.push(base + rng.normal(0.0, 0.4));
                ids.push(format!("s{k}"));
            }
        }
        let u = utterance_metrics(&pred, &truth).unwrap();
        let s = system_metrics(&pred, &truth, &ids).unwrap();
        assert!(s.mse < u.mse, "{} vs {}", s.mse, u.mse);
    }

    #[test]
    fn competition_rank_examples() {
        // system-level KTAU column of the published competition table
        let ktau = [0.547, 0.705, 0.789, 0.779, 0.750, 0.758, 0.758];
        assert_eq!(competition_rank(&ktau, true), vec![7, 6, 1, 2, 5, 3, 3]);
        assert_eq!(competition_rank(&[0.5; 4], true), vec![1; 4]);
        assert_eq!(
            competition_rank(&[4.0, 3.0, 2.0, 1.0], true),
            vec![1, 2, 3, 4]
        );
        assert_eq!(
            competition_rank(&[4.0, 3.0, 2.0, 1.0], false),
            vec![4, 3, 2, 1]
        );
        assert_eq!(
            competition_rank_opt(&[None, Some(0.1), Some(0.3)], true),
            vec![3, 2, 1]
        );
    }

    #[test]
    fn three_decimal_rounding() {
        assert_eq!(format_3dp(0.9125), "0.912");
        assert_eq!(format_3dp(0.9135), "0.914");
        assert_eq!(format_3dp(0.9136), "0.914");
        assert_eq!(format_3dp(0.91251), "0.913");
        assert_eq!(format_3dp(0.9995), "1.000");
        assert_eq!(format_3dp(9.9996), "10.000");
        assert_eq!(format_3dp(-0.0004), "0.000");
        assert_eq!(format_3dp(-0.2346), "-0.235");
        assert_eq!(format_3dp(1.0), "1.000");
        assert_eq!(format_3dp(0.056), "0.056");
        assert_eq!(format_3dp(1e-7), "0.000");
        assert_eq!(format_3dp(f64::NAN), "n/a");
    }

    #[test]
    fn singleton_table() {
        let r = utterance_metrics(&[1.0, 2.0], &[1.0, 3.0]).unwrap();
        let t = build_rank_table(Level::Utterance, &[("only".into(), r)]).unwrap();
        assert_eq!(t.rows[0].ranks, [1, 1, 1, 1]);
        let text = render_rank_table(&t);
        assert!(text.contains("only"));
        assert!(text.contains("Utterance-level (Raw)"));
        assert!(build_rank_table(Level::System, &[]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0);
    }

    proptest! {
        #[test]
        fn kendall_matches_pair_enumeration(
            raw in prop::collection::vec((0u8..6, 0u8..6), 2..50)
        ) {
            let x: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let y: Vec<f64> = raw.iter().map(|r| r.1 as f64).collect();
            prop_assert_eq!(kendall_tau_b(&x, &y), brute_tau_b(&x, &y));
        }

        #[test]
        fn correlations_invariant_under_increasing_affine_maps(
            raw in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40),
            scale in 0.1f64..10.0, shift in -10.0f64..10.0,
        ) {
            let x: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let y: Vec<f64> = raw.iter().map(|r| r.1).collect();
            let xt: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
            let a = utterance_metrics(&x, &y).unwrap();
            let b = utterance_metrics(&xt, &y).unwrap();
            prop_assert!((a.lcc.unwrap() - b.lcc.unwrap()).abs() <= 1e-9);
            // affine maps can merge nearly-equal values through rounding, so
            // compare rank statistics only when the ranks are unchanged
            if average_ranks(&x) == average_ranks(&xt) {
                prop_assert_eq!(a.srcc, b.srcc);
                prop_assert_eq!(a.ktau, b.ktau);
            }
        }

        #[test]
        fn rank_table_is_consistent_with_raw_values(
            raw in prop::collection::vec((0u8..20, 0u8..20, 0u8..20, 0u8..20), 1..10)
        ) {
            let entries: Vec<(String, MetricsReport)> = raw.iter().enumerate().map(|(i, r)| (
                format!("t{i}"),
                MetricsReport {
                    level: Level::System,
                    mse: r.0 as f64 / 100.0,
                    lcc: Some(r.1 as f64 / 20.0),
                    srcc: Some(r.2 as f64 / 20.0),
                    ktau: Some(r.3 as f64 / 20.0),
                    n: 5,
                },
            )).collect();
            let t = build_rank_table(Level::System, &entries).unwrap();
            for a in &t.rows {
                for b in &t.rows {
                    let pairs = [
                        (-a.report.mse, -b.report.mse, a.ranks[0], b.ranks[0]),
                        (a.report.lcc.unwrap(), b.report.lcc.unwrap(), a.ranks[1], b.ranks[1]),
                        (a.report.srcc.unwrap(), b.report.srcc.unwrap(), a.ranks[2], b.ranks[2]),
                        (a.report.ktau.unwrap(), b.report.ktau.unwrap(), a.ranks[3], b.ranks[3]),
                    ];
                    for (va, vb, ra, rb) in pairs {
                        if va > vb { prop_assert!(ra < rb); }
                        if va == vb { prop_assert_eq!(ra, rb); }
                    }
                }
            }
        }
    }
}
