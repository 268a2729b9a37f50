//! Synthetic embeddings, system labels, ground-truth MOS and biased raters.
//!
//! System `k` lives in a Gaussian cluster around `s·e_k`. Each utterance's
//! true MOS is its system's base MOS plus Gaussian jitter. Raters come in two
//! disjoint pools (train and test); each rater carries a fixed additive bias
//! and adds independent noise to every score.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::numkernel::RngState;

const RATER_BIAS_TAG: u64 = 0x7261_7465_7200_0000;
const TRAIN_POOL_TAG: u64 = 0x706f_6f6c_0000_0001;
const TEST_POOL_TAG: u64 = 0x706f_6f6c_0000_0002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_systems: usize,
    pub dim: usize,
    pub per_system: usize,
    pub system_mos: Vec<f64>,
    pub cluster_sep: f64,
    pub embed_noise: f64,
    pub utterance_noise: f64,
    pub rater_bias_std: f64,
    pub rater_noise_std: f64,
    pub n_raters_train: usize,
    pub n_raters_test: usize,
    pub raters_per_utt: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_systems: 4,
            dim: 64,
            per_system: 200,
            system_mos: vec![2.0, 3.0, 3.5, 4.5],
            cluster_sep: 4.0,
            embed_noise: 1.0,
            utterance_noise: 0.1,
            rater_bias_std: 0.3,
            rater_noise_std: 0.2,
            n_raters_train: 10,
            n_raters_test: 10,
            raters_per_utt: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("synth: {msg}")));
        if self.n_systems < 2 {
            return bad(format!(
                "n_systems must be at least 2, got {}",
                self.n_systems
            ));
        }
        if self.system_mos.len() != self.n_systems {
            return bad(format!(
                "system_mos has {} entries for {} systems",
                self.system_mos.len(),
                self.n_systems
            ));
        }
        if let Some(m) = self.system_mos.iter().find(|m| !(1.0..=5.0).contains(*m)) {
            return bad(format!("system MOS {m} outside [1, 5]"));
        }
        if self.dim < self.n_systems {
            return bad(format!(
                "dim {} is smaller than n_systems {}",
                self.dim, self.n_systems
            ));
        }
        if self.per_system == 0 {
            return bad("per_system must be positive".into());
        }
        if !(self.cluster_sep.is_finite() && self.cluster_sep > 0.0) {
            return bad(format!(
                "cluster_sep must be positive, got {}",
                self.cluster_sep
            ));
        }
        for (name, v) in [
            ("embed_noise", self.embed_noise),
            ("utterance_noise", self.utterance_noise),
            ("rater_bias_std", self.rater_bias_std),
            ("rater_noise_std", self.rater_noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.raters_per_utt == 0 {
            return bad("raters_per_utt must be positive".into());
        }
        Ok(())
    }

    fn system_id(k: usize) -> String {
        format!("sys{k:02}")
    }

    fn rater_id(r: usize) -> String {
        format!("rater{r:02}")
    }
}

/// Which rater pool labels a set of utterances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterPool {
    Train,
    Test,
}

/// What the generator knows that a model never sees.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub utt_ids: Vec<String>,
    pub true_mos: Vec<f64>,
    pub system_index: Vec<usize>,
    pub rater_bias: BTreeMap<String, f64>,
    pub train_raters: Vec<String>,
    pub test_raters: Vec<String>,
}

impl GroundTruth {
    pub fn pool(&self, pool: RaterPool) -> &[String] {
        match pool {
            RaterPool::Train => &self.train_raters,
            RaterPool::Test => &self.test_raters,
        }
    }
}

/// Draws embeddings and true MOS. Samples carry the true MOS as their
/// label and no rater scores; use [`label_with_raters`] for observed labels.
///
/// Embedding values are rounded to `f32` precision so a dataset survives the
/// binary embedding format bit-exactly.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    let n = cfg.n_systems * cfg.per_system;
    let mut samples = Vec::with_capacity(n);
    let mut truth = GroundTruth {
        utt_ids: Vec::with_capacity(n),
        true_mos: Vec::with_capacity(n),
        system_index: Vec::with_capacity(n),
        rater_bias: BTreeMap::new(),
        train_raters: Vec::new(),
        test_raters: Vec::new(),
    };

    for k in 0..cfg.n_systems {
        let mut rng = root.fork(k as u64);
        let system_id = SynthConfig::system_id(k);
        for i in 0..cfg.per_system {
            let embedding: Vec<f64> = (0..cfg.dim)
                .map(|j| {
                    let center = if j == k { cfg.cluster_sep } else { 0.0 };
                    rng.normal(center, cfg.embed_noise) as f32 as f64
                })
                .collect();
            let mos = rng
                .normal(cfg.system_mos[k], cfg.utterance_noise)
                .clamp(1.0, 5.0);
            let utt_id = format!("{system_id}_utt{i:04}");
            truth.utt_ids.push(utt_id.clone());
            truth.true_mos.push(mos);
            truth.system_index.push(k);
            samples.push(Sample {
                utt_id,
                system_id: system_id.clone(),
                mos: Some(mos),
                rater_scores: None,
                embedding,
            });
        }
    }

    let mut bias_rng = root.fork(RATER_BIAS_TAG);
    for r in 0..cfg.n_raters_train + cfg.n_raters_test {
        let id = SynthConfig::rater_id(r);
        truth
            .rater_bias
            .insert(id.clone(), bias_rng.normal(0.0, cfg.rater_bias_std));
        if r < cfg.n_raters_train {
            truth.train_raters.push(id);
        } else {
            truth.test_raters.push(id);
        }
    }

    Ok((Dataset::new(samples)?, truth))
}

/// Scores from `raters_per_utt` distinct raters of `pool` for every
/// utterance, in ground-truth order. Each score is
/// `clamp(true MOS + bias + N(0, σ_r), 1, 5)`.
pub fn simulate_raters(
    truth: &GroundTruth,
    cfg: &SynthConfig,
    pool: RaterPool,
) -> Result<Vec<Vec<(String, f64)>>> {
    let raters = truth.pool(pool);
    if raters.is_empty() {
        return Err(Error::Config(format!("{pool:?} rater pool is empty")));
    }
    if cfg.raters_per_utt > raters.len() {
        return Err(Error::Config(format!(
            "raters_per_utt {} exceeds {:?} pool size {}",
            cfg.raters_per_utt,
            pool,
            raters.len()
        )));
    }
    let tag = match pool {
        RaterPool::Train => TRAIN_POOL_TAG,
        RaterPool::Test => TEST_POOL_TAG,
    };
    let mut rng = RngState::new(cfg.seed).fork(tag);
    let mut order: Vec<usize> = (0..raters.len()).collect();
    Ok(truth
        .true_mos
        .iter()
        .map(|&mos| {
            // partial Fisher-Yates: the first raters_per_utt slots are the pick
            for i in 0..cfg.raters_per_utt {
                let j = i + rng.index(order.len() - i);
                order.swap(i, j);
            }
            order[..cfg.raters_per_utt]
                .iter()
                .map(|&r| {
                    let id = &raters[r];
                    let score = (mos + truth.rater_bias[id] + rng.normal(0.0, cfg.rater_noise_std))
                        .clamp(1.0, 5.0);
                    (id.clone(), score)
                })
                .collect()
        })
        .collect())
}

/// The dataset relabeled by `pool`: rater scores attached and `mos` set to
/// their mean.
pub fn label_with_raters(
    data: &Dataset,
    truth: &GroundTruth,
    cfg: &SynthConfig,
    pool: RaterPool,
) -> Result<Dataset> {
    let scores = simulate_raters(truth, cfg, pool)?;
    let by_utt: HashMap<String, Vec<(String, f64)>> =
        truth.utt_ids.iter().cloned().zip(scores).collect();
    data.with_rater_scores(&by_utt)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum TruthLine {
    Utterance {
        utt_id: String,
        system_index: usize,
        true_mos: f64,
    },
    Rater {
        rater_id: String,
        pool: RaterPool,
        bias: f64,
    },
}

/// Writes the ground-truth sidecar: one JSON object per line, tagged by
/// `kind` (`utterance` or `rater`).
pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let emit = |out: &mut BufWriter<fs::File>, line: TruthLine| -> Result<()> {
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))
    };
    for ((utt_id, &system_index), &true_mos) in truth
        .utt_ids
        .iter()
        .zip(&truth.system_index)
        .zip(&truth.true_mos)
    {
        emit(
            &mut out,
            TruthLine::Utterance {
                utt_id: utt_id.clone(),
                system_index,
                true_mos,
            },
        )?;
    }
    for (pool, ids) in [
        (RaterPool::Train, &truth.train_raters),
        (RaterPool::Test, &truth.test_raters),
    ] {
        for id in ids {
            emit(
                &mut out,
                TruthLine::Rater {
                    rater_id: id.clone(),
                    pool,
                    bias: truth.rater_bias[id],
                },
            )?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut truth = GroundTruth {
        utt_ids: Vec::new(),
        true_mos: Vec::new(),
        system_index: Vec::new(),
        rater_bias: BTreeMap::new(),
        train_raters: Vec::new(),
        test_raters: Vec::new(),
    };
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TruthLine = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        match parsed {
            TruthLine::Utterance {
                utt_id,
                system_index,
                true_mos,
            } => {
                truth.utt_ids.push(utt_id);
                truth.system_index.push(system_index);
                truth.true_mos.push(true_mos);
            }
            TruthLine::Rater {
                rater_id,
                pool,
                bias,
            } => {
                match pool {
                    RaterPool::Train => truth.train_raters.push(rater_id.clone()),
                    RaterPool::Test => truth.test_raters.push(rater_id.clone()),
                }
                truth.rater_bias.insert(rater_id, bias);
            }
        }
    }
    Ok(truth)
}
