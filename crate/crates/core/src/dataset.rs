//! Embedding datasets: JSON-lines manifests, the `MOEB` binary embedding
//! format, mean pooling of frame-level features, per-dimension
//! normalization and stratified splitting.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::RngState;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MOEB";
pub const EMBEDDING_VERSION: u32 = 1;
const EMBEDDING_HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Tolerance for `mos == mean(rater_scores)`.
pub const MOS_CONSISTENCY_TOL: f64 = 1e-6;

/// One utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub utt_id: String,
    pub system_id: String,
    pub mos: Option<f64>,
    pub rater_scores: Option<Vec<(String, f64)>>,
    /// Global (pooled) embedding of length `D`.
    pub embedding: Vec<f64>,
}

/// An immutable collection of samples sharing one embedding width.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim: usize,
    system_vocab: Vec<String>,
}

impl Dataset {
    /// Validates the samples and builds the lexicographic system vocabulary.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let vocab: BTreeSet<&str> = samples.iter().map(|s| s.system_id.as_str()).collect();
        let vocab = vocab.into_iter().map(str::to_owned).collect();
        Self::with_vocab(samples, vocab)
    }

    /// Like [`Dataset::new`] but with an explicit vocabulary, which must be
    /// sorted, unique and cover every sample. Subsets keep their parent's
    /// vocabulary so class indices stay stable across splits.
    pub fn with_vocab(samples: Vec<Sample>, system_vocab: Vec<String>) -> Result<Self> {
        if system_vocab.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "system vocabulary must be sorted and unique".into(),
            ));
        }
        let dim = samples.first().map_or(0, |s| s.embedding.len());
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            validate_sample(s)?;
            if s.embedding.len() != dim {
                return Err(Error::Sample {
                    utt_id: s.utt_id.clone(),
                    reason: format!(
                        "embedding has dimension {}, dataset has {dim}",
                        s.embedding.len()
                    ),
                });
            }
            if !seen.insert(s.utt_id.as_str()) {
                return Err(Error::Sample {
                    utt_id: s.utt_id.clone(),
                    reason: "duplicate utt_id".into(),
                });
            }
            if system_vocab.binary_search(&s.system_id).is_err() {
                return Err(Error::Sample {
                    utt_id: s.utt_id.clone(),
                    reason: format!("system {} missing from vocabulary", s.system_id),
                });
            }
        }
        Ok(Self {
            samples,
            dim,
            system_vocab,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn system_vocab(&self) -> &[String] {
        &self.system_vocab
    }

    pub fn n_classes(&self) -> usize {
        self.system_vocab.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_index(&self, system_id: &str) -> Option<usize> {
        self.system_vocab
            .binary_search_by(|v| v.as_str().cmp(system_id))
            .ok()
    }

    /// Class index of every sample, in sample order.
    pub fn class_labels(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| {
                self.class_index(&s.system_id)
                    .expect("vocab covers samples")
            })
            .collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.mos.is_some())
    }

    /// Samples at `indices`, in that order, sharing this dataset's vocabulary.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            dim: self.dim,
            system_vocab: self.system_vocab.clone(),
        }
    }

    /// Replaces rater scores (and the derived `mos`) by utt_id. Samples not
    /// named in `scores` keep their labels.
    pub fn with_rater_scores(
        &self,
        scores: &HashMap<String, Vec<(String, f64)>>,
    ) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut s = s.clone();
                if let Some(r) = scores.get(&s.utt_id) {
                    s.mos = Some(mean_score(r));
                    s.rater_scores = Some(r.clone());
                }
                s
            })
            .collect();
        Dataset::with_vocab(samples, self.system_vocab.clone())
    }
}

fn mean_score(scores: &[(String, f64)]) -> f64 {
    scores.iter().map(|(_, v)| v).sum::<f64>() / scores.len() as f64
}

fn validate_sample(s: &Sample) -> Result<()> {
    let fail = |reason: String| Error::Sample {
        utt_id: s.utt_id.clone(),
        reason,
    };
    if s.embedding.is_empty() {
        return Err(fail("empty embedding".into()));
    }
    if s.embedding.iter().any(|v| !v.is_finite()) {
        return Err(fail("embedding contains NaN or Inf".into()));
    }
    if let Some(m) = s.mos {
        if !(1.0..=5.0).contains(&m) {
            return Err(fail(format!("mos {m} outside [1, 5]")));
        }
    }
    if let Some(scores) = &s.rater_scores {
        if scores.is_empty() {
            return Err(fail("empty rater_scores".into()));
        }
        if let Some((r, v)) = scores.iter().find(|(_, v)| !(1.0..=5.0).contains(v)) {
            return Err(fail(format!("rater {r} score {v} outside [1, 5]")));
        }
        if let Some(m) = s.mos {
            let mean = mean_score(scores);
            if (mean - m).abs() > MOS_CONSISTENCY_TOL {
                return Err(fail(format!("mos {m} inconsistent with rater mean {mean}")));
            }
        }
    }
    Ok(())
}

/// Mean over `T` frames of a `T×D` feature matrix.
pub fn pool_features(frames: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot pool zero frames".into()))?;
    let dim = first.len();
    let mut acc = vec![0.0; dim];
    for frame in frames {
        if frame.len() != dim {
            return Err(Error::dims("pool_features frame", &[frame.len()], &[dim]));
        }
        for (a, v) in acc.iter_mut().zip(frame) {
            *a += v;
        }
    }
    let t = frames.len() as f64;
    acc.iter_mut().for_each(|a| *a /= t);
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Binary embedding files

/// Row-major `rows × dim` matrix as stored in a `MOEB` file.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, index: usize) -> Option<&[f32]> {
        (index < self.rows()).then(|| &self.data[index * self.dim..(index + 1) * self.dim])
    }
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < EMBEDDING_HEADER_LEN {
        return Err(fail("truncated header".into()));
    }
    if &bytes[..4] != EMBEDDING_MAGIC {
        return Err(fail(format!("unknown magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[EMBEDDING_HEADER_LEN..];
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail("row count overflows".into()))?;
    if body.len() != expected {
        return Err(fail(format!(
            "expected {expected} payload bytes for {rows}×{dim}, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EmbeddingMatrix { dim, data })
}

pub fn write_embedding_file(path: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<fs::File>, buf: &[u8]| {
        out.write_all(buf).map_err(|e| Error::io(path, e))
    };
    write(&mut out, EMBEDDING_MAGIC)?;
    write(&mut out, &EMBEDDING_VERSION.to_le_bytes())?;
    write(&mut out, &(matrix.dim as u32).to_le_bytes())?;
    write(&mut out, &(matrix.rows() as u64).to_le_bytes())?;
    for v in &matrix.data {
        write(&mut out, &v.to_le_bytes())?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    utt_id: String,
    system_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rater_scores: Option<Vec<(String, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<InlineEmbedding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding_ref: Option<EmbeddingRef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum InlineEmbedding {
    Vector(Vec<f64>),
    Frames(Vec<Vec<f64>>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingRef {
    path: String,
    row_index: u64,
}

/// Loads a JSON-lines manifest. Relative `embedding_ref` paths resolve
/// against the manifest's directory; frame matrices are mean-pooled.
///
/// A line carrying `rater_scores` but no `mos` gets `mos` set to the rater
/// mean.
pub fn load_manifest(path: &Path, require_labels: bool) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut binaries: HashMap<PathBuf, EmbeddingMatrix> = HashMap::new();
    let mut samples = Vec::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: line_no,
            reason: e.to_string(),
        })?;
        let embedding = match (parsed.embedding, parsed.embedding_ref) {
            (Some(InlineEmbedding::Vector(v)), None) => v,
            (Some(InlineEmbedding::Frames(frames)), None) => {
                pool_features(&frames).map_err(|e| Error::Sample {
                    utt_id: parsed.utt_id.clone(),
                    reason: e.to_string(),
                })?
            }
            (None, Some(r)) => {
                let bin_path = base.join(&r.path);
                if !binaries.contains_key(&bin_path) {
                    let m = read_embedding_file(&bin_path)?;
                    binaries.insert(bin_path.clone(), m);
                }
                let row = binaries[&bin_path]
                    .row(r.row_index as usize)
                    .ok_or_else(|| Error::Sample {
                        utt_id: parsed.utt_id.clone(),
                        reason: format!("row {} out of range in {}", r.row_index, r.path),
                    })?;
                row.iter().map(|&v| v as f64).collect()
            }
            _ => {
                return Err(Error::Manifest {
                    line: line_no,
                    reason: "exactly one of embedding or embedding_ref is required".into(),
                })
            }
        };
        let mos = parsed.mos.or_else(|| {
            parsed
                .rater_scores
                .as_deref()
                .filter(|r| !r.is_empty())
                .map(mean_score)
        });
        if require_labels && mos.is_none() {
            return Err(Error::Sample {
                utt_id: parsed.utt_id,
                reason: "missing mos label".into(),
            });
        }
        samples.push(Sample {
            utt_id: parsed.utt_id,
            system_id: parsed.system_id,
            mos,
            rater_scores: parsed.rater_scores,
            embedding,
        });
    }
    Dataset::new(samples)
}

/// Where [`write_manifest`] puts the embeddings.
#[derive(Clone, Debug)]
pub enum EmbeddingStorage {
    /// Inline JSON arrays (exact for any `f64`).
    Inline,
    /// A `MOEB` file at this path, relative to the manifest's directory.
    /// Every value must be exactly representable as `f32`.
    Binary(PathBuf),
}

pub fn write_manifest(dataset: &Dataset, path: &Path, storage: &EmbeddingStorage) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    if let EmbeddingStorage::Binary(rel) = storage {
        let mut data = Vec::with_capacity(dataset.len() * dataset.dim());
        for s in dataset.samples() {
            for &v in &s.embedding {
                let narrow = v as f32;
                if narrow as f64 != v {
                    return Err(Error::Sample {
                        utt_id: s.utt_id.clone(),
                        reason: format!("embedding value {v} is not exactly representable as f32"),
                    });
                }
                data.push(narrow);
            }
        }
        let matrix = EmbeddingMatrix {
            dim: dataset.dim(),
            data,
        };
        write_embedding_file(&base.join(rel), &matrix)?;
    }

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (row, s) in dataset.samples().iter().enumerate() {
        let (embedding, embedding_ref) = match storage {
            EmbeddingStorage::Inline => (Some(InlineEmbedding::Vector(s.embedding.clone())), None),
            EmbeddingStorage::Binary(rel) => (
                None,
                Some(EmbeddingRef {
                    path: rel.to_string_lossy().into_owned(),
                    row_index: row as u64,
                }),
            ),
        };
        let line = ManifestLine {
            utt_id: s.utt_id.clone(),
            system_id: s.system_id.clone(),
            mos: s.mos,
            rater_scores: s.rater_scores.clone(),
            embedding,
            embedding_ref,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-dimension affine standardization fitted on a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Standard deviations below this get scale 1.
const MIN_STD: f64 = 1e-12;

impl Normalizer {
    /// Mean and population standard deviation of each dimension.
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot fit a normalizer on an empty dataset".into(),
            ));
        }
        let n = train.len() as f64;
        let dim = train.dim();
        let mut mean = vec![0.0; dim];
        for s in train.samples() {
            for (m, v) in mean.iter_mut().zip(&s.embedding) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for s in train.samples() {
            for ((acc, v), m) in var.iter_mut().zip(&s.embedding).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let std = (v / n).sqrt();
                if std < MIN_STD {
                    1.0
                } else {
                    std
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dims("normalizer input", &[x.len()], &[self.dim()]));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim() != self.dim() && !data.is_empty() {
            return Err(Error::dims(
                "apply_normalizer",
                &[data.dim()],
                &[self.dim()],
            ));
        }
        let samples = data
            .samples()
            .iter()
            .map(|s| {
                Ok(Sample {
                    embedding: self.transform(&s.embedding)?,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::with_vocab(samples, data.system_vocab().to_vec())
    }
}

// ---------------------------------------------------------------------------
// Splitting

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "split fractions must be positive, got {parts:?}"
            )));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must sum to 1, got {total}"
            )));
        }
        Ok(())
    }
}

/// Index sets of a stratified split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: each system's samples are shuffled with a per-system
/// sub-stream, `floor(n·val)` go to validation, `floor(n·test)` to test and
/// the remainder to train. Each part lists indices in ascending order.
pub fn split_indices(data: &Dataset, fractions: SplitFractions, seed: u64) -> Result<SplitIndices> {
    fractions.validate()?;
    let root = RngState::new(seed);
    let mut by_system: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes()];
    for (i, label) in data.class_labels().into_iter().enumerate() {
        by_system[label].push(i);
    }
    let mut out = SplitIndices {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut members) in by_system.into_iter().enumerate() {
        let n = members.len();
        root.fork(class as u64).shuffle(&mut members);
        // tiny slack so that e.g. 20 × 0.15 is not floored to 2
        let n_val = (n as f64 * fractions.val + 1e-9).floor() as usize;
        let n_test = (n as f64 * fractions.test + 1e-9).floor() as usize;
        out.val.extend_from_slice(&members[..n_val]);
        out.test.extend_from_slice(&members[n_val..n_val + n_test]);
        out.train.extend_from_slice(&members[n_val + n_test..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

pub fn split_dataset(
    data: &Dataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let idx = split_indices(data, fractions, seed)?;
    Ok((
        data.subset(&idx.train),
        data.subset(&idx.val),
        data.subset(&idx.test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(id: &str, system: &str, mos: Option<f64>, emb: Vec<f64>) -> Sample {
        Sample {
            utt_id: id.into(),
            system_id: system.into(),
            mos,
            rater_scores: None,
            embedding: emb,
        }
    }

    fn write(path: &Path, text: &str) {
        fs::write(path, text).unwrap();
    }

    #[test]
    fn load_inline_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write(
            &path,
            r#"{"utt_id":"a","system_id":"s1","mos":3.5,"embedding":[1,2,3,4]}
{"utt_id":"b","system_id":"s0","mos":2.0,"embedding":[0,0,0,1]}
"#,
        );
        let d = load_manifest(&path, true).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 4);
        assert_eq!(d.system_vocab(), ["s0", "s1"]);
        assert_eq!(d.class_labels(), vec![1, 0]);
    }

    #[test]
    fn missing_label_names_utterance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write(
            &path,
            r#"{"utt_id":"u17","system_id":"s","embedding":[1,2]}"#,
        );
        let err = load_manifest(&path, true).unwrap_err();
        assert!(err.to_string().contains("u17"), "{err}");
        assert!(load_manifest(&path, false).is_ok());
    }

    #[test]
    fn inconsistent_rater_mean_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        // mean of 3 and 4 is 3.5, declared 3.6
        write(
            &path,
            r#"{"utt_id":"x","system_id":"s","mos":3.6,"rater_scores":[["r0",3.0],["r1",4.0]],"embedding":[1]}"#,
        );
        let err = load_manifest(&path, true).unwrap_err();
        assert!(err.to_string().contains("inconsistent"), "{err}");
    }

    #[test]
    fn rater_scores_imply_mos() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write(
            &path,
            r#"{"utt_id":"x","system_id":"s","rater_scores":[["r0",3.0],["r1",4.0]],"embedding":[1]}"#,
        );
        let d = load_manifest(&path, true).unwrap();
        assert_eq!(d.samples()[0].mos, Some(3.5));
    }

    #[test]
    fn dimension_mismatch_and_nan_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write(
            &path,
            r#"{"utt_id":"a","system_id":"s","embedding":[1,2]}
{"utt_id":"b","system_id":"s","embedding":[1,2,3]}"#,
        );
        assert!(load_manifest(&path, false).is_err());
        assert!(Dataset::new(vec![sample("a", "s", None, vec![f64::NAN])]).is_err());
    }

    #[test]
    fn frames_are_pooled_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write(
            &path,
            r#"{"utt_id":"a","system_id":"s","embedding":[[1,3],[3,5]]}"#,
        );
        let d = load_manifest(&path, false).unwrap();
        assert_eq!(d.samples()[0].embedding, vec![2.0, 4.0]);
    }

    #[test]
    fn unknown_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("e.bin"),
            b"NOPE\x01\0\0\0\x01\0\0\0\x01\0\0\0\0\0\0\0\0\0\x80\x3f",
        )
        .unwrap();
        let path = dir.path().join("m.jsonl");
        write(
            &path,
            r#"{"utt_id":"a","system_id":"s","embedding_ref":{"path":"e.bin","row_index":0}}"#,
        );
        let err = load_manifest(&path, false).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s0 = sample("u0", "b", Some(3.25), vec![0.5, -1.25, 3.0e-3f32 as f64]);
        s0.rater_scores = Some(vec![("r1".into(), 3.0), ("r2".into(), 3.5)]);
        let s1 = sample("u1", "a", None, vec![1.0, 2.0, 0.1f32 as f64]);
        let d = Dataset::new(vec![s0, s1]).unwrap();
        let path = dir.path().join("m.jsonl");
        write_manifest(&d, &path, &EmbeddingStorage::Binary("emb.moeb".into())).unwrap();
        assert_eq!(load_manifest(&path, false).unwrap(), d);
        write_manifest(&d, &path, &EmbeddingStorage::Inline).unwrap();
        assert_eq!(load_manifest(&path, false).unwrap(), d);
    }

    #[test]
    fn binary_storage_refuses_lossy_values() {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset::new(vec![sample("u0", "a", None, vec![0.1])]).unwrap();
        let path = dir.path().join("m.jsonl");
        assert!(write_manifest(&d, &path, &EmbeddingStorage::Binary("e.moeb".into())).is_err());
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(
            pool_features(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap(),
            vec![2.0, 4.0]
        );
        assert_eq!(pool_features(&[vec![7.0, -1.0]]).unwrap(), vec![7.0, -1.0]);
        assert!(pool_features(&[]).is_err());
    }

    #[test]
    fn normalizer_hand_case() {
        let d = Dataset::new(vec![
            sample("a", "s", None, vec![0.0, 2.0]),
            sample("b", "s", None, vec![2.0, 2.0]),
        ])
        .unwrap();
        let n = Normalizer::fit(&d).unwrap();
        assert_eq!(n.mean, vec![1.0, 2.0]);
        assert_eq!(n.scale, vec![1.0, 1.0]);
    }

    #[test]
    fn constant_dataset_normalizes_to_zero() {
        let d = Dataset::new(
            (0..5)
                .map(|i| sample(&format!("u{i}"), "s", None, vec![3.0, -7.5]))
                .collect(),
        )
        .unwrap();
        let n = Normalizer::fit(&d).unwrap();
        let out = n.apply(&d).unwrap();
        assert!(out.samples().iter().all(|s| s.embedding == vec![0.0, 0.0]));
    }

    #[test]
    fn normalizer_rejects_dimension_mismatch() {
        let d = Dataset::new(vec![sample("a", "s", None, vec![0.0, 2.0])]).unwrap();
        let n = Normalizer::fit(&d).unwrap();
        let other = Dataset::new(vec![sample("a", "s", None, vec![0.0, 2.0, 1.0])]).unwrap();
        assert!(n.apply(&other).is_err());
        assert!(Normalizer::fit(&Dataset::new(vec![]).unwrap()).is_err());
    }

    fn grid_dataset(per_system: usize, systems: usize) -> Dataset {
        let mut samples = Vec::new();
        for s in 0..systems {
            for i in 0..per_system {
                samples.push(sample(
                    &format!("s{s}_u{i}"),
                    &format!("sys{s}"),
                    Some(3.0),
                    vec![i as f64, s as f64],
                ));
            }
        }
        Dataset::new(samples).unwrap()
    }

    #[test]
    fn stratified_split_counts() {
        let d = grid_dataset(4, 3);
        let f = SplitFractions {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        };
        let (tr, va, te) = split_dataset(&d, f, 42).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (6, 3, 3));
        for part in [&tr, &va, &te] {
            let mut counts = vec![0; 3];
            for l in part.class_labels() {
                counts[l] += 1;
            }
            let expected = if part.len() == 6 { 2 } else { 1 };
            assert!(counts.iter().all(|&c| c == expected), "{counts:?}");
        }
        assert_eq!(
            split_indices(&d, f, 42).unwrap(),
            split_indices(&d, f, 42).unwrap()
        );
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let d = grid_dataset(4, 3);
        let f = SplitFractions {
            train: 0.6,
            val: 0.3,
            test: 0.2,
        };
        assert!(split_dataset(&d, f, 0).is_err());
    }

    #[test]
    fn tiny_system_keeps_its_sample_in_train() {
        let mut samples: Vec<Sample> = grid_dataset(10, 1).samples().to_vec();
        samples.push(sample("lonely", "rare", Some(2.0), vec![0.0, 0.0]));
        let d = Dataset::new(samples).unwrap();
        let (tr, _, _) = split_dataset(&d, SplitFractions::default(), 1).unwrap();
        assert!(tr.samples().iter().any(|s| s.utt_id == "lonely"));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(per_system in 1usize..30, systems in 1usize..5, seed in any::<u64>()) {
            let d = grid_dataset(per_system, systems);
            let idx = split_indices(&d, SplitFractions::default(), seed).unwrap();
            let mut all: Vec<usize> = idx.train.iter().chain(&idx.val).chain(&idx.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        }

        #[test]
        fn pooling_commutes_with_normalization(
            frames in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..8),
            mean in prop::collection::vec(-5.0f64..5.0, 3),
            scale in prop::collection::vec(0.1f64..4.0, 3),
        ) {
            let n = Normalizer { mean, scale };
            let normalized: Vec<Vec<f64>> = frames.iter().map(|f| n.transform(f).unwrap()).collect();
            let a = pool_features(&normalized).unwrap();
            let b = n.transform(&pool_features(&frames).unwrap()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalized_training_set_is_standardized(
            rows in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 4), 2..40)
        ) {
            let samples = rows.iter().enumerate()
                .map(|(i, r)| sample(&format!("u{i}"), "s", None, r.clone()))
                .collect();
            let d = Dataset::new(samples).unwrap();
            let n = Normalizer::fit(&d).unwrap();
            let out = n.apply(&d).unwrap();
            let len = out.len() as f64;
            for j in 0..4 {
                let col: Vec<f64> = out.samples().iter().map(|s| s.embedding[j]).collect();
                let m = col.iter().sum::<f64>() / len;
                prop_assert!(m.abs() <= 1e-9);
                if col.iter().any(|v| v.abs() > 1e-9) {
                    let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len).sqrt();
                    prop_assert!((sd - 1.0).abs() <= 1e-9, "dim {} std {}", j, sd);
                }
            }
        }
    }
}
