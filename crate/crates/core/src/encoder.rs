//! Dual encoder over hashed term frequencies.
//!
//! Both encoders are linear maps `d x F` applied to an L2-normalized hashed
//! bag of tokens. They are trained by gradient ascent on the contrastive
//! objective
//!
//! ```text
//! l = q.e0 - log sum_{i=0..I} exp(q.e_i)
//! ```
//!
//! where `q` is the query embedding, `e0` the positive paragraph and
//! `e1..eI` the negatives.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{fnv1a64, tokenize};

pub const DEFAULT_EMBEDDING_DIM: usize = 64;
pub const DEFAULT_FEATURE_DIM: usize = 2048;
pub const DEFAULT_NEGATIVES: usize = 5;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_SEED: u64 = 20230701;

const MODEL_MAGIC: &[u8; 8] = b"FRAGENC\0";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EncoderError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite parameter update in epoch {epoch}")]
    NonFiniteUpdate { epoch: usize },
    #[error("invalid training example: {0}")]
    InvalidExample(String),
    #[error("invalid training setup: {0}")]
    InvalidTraining(String),
    #[error("bad model file: {0}")]
    BadModelFile(String),
}

fn check_dim(expected: usize, actual: usize) -> Result<(), EncoderError> {
    if expected == actual {
        Ok(())
    } else {
        Err(EncoderError::DimensionMismatch { expected, actual })
    }
}

/// L2-normalized hashed term frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn nonzeros(&self) -> SparseFeatures {
        SparseFeatures(
            self.values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect(),
        )
    }
}

/// Ascending `(bucket, value)` pairs of a feature vector.
#[derive(Debug, Clone)]
struct SparseFeatures(Vec<(usize, f64)>);

pub fn featurize<S: AsRef<str>>(tokens: &[S], feature_dim: usize) -> FeatureVector {
    assert!(feature_dim >= 1, "feature dimension must be positive");
    let mut values = vec![0.0; feature_dim];
    for token in tokens {
        let bucket = (fnv1a64(token.as_ref().as_bytes()) % feature_dim as u64) as usize;
        values[bucket] += 1.0;
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    FeatureVector { values }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Separate key (paragraph) and query encoders, each a row-major `d x F` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    dim: usize,
    feature_dim: usize,
    seed: u64,
    w_key: Vec<f64>,
    w_query: Vec<f64>,
}

/// Gradients of the objective, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub key: Vec<f64>,
    pub query: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query_text: String,
    pub positive_text: String,
    pub negative_texts: Vec<String>,
}

impl TrainingExample {
    pub fn validate(&self, negatives: usize) -> Result<(), EncoderError> {
        if self.negative_texts.len() != negatives {
            return Err(EncoderError::InvalidExample(format!(
                "expected {negatives} negatives, got {}",
                self.negative_texts.len()
            )));
        }
        if self.negative_texts.contains(&self.positive_text) {
            return Err(EncoderError::InvalidExample(
                "positive appears among negatives".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Mean objective over the training set before the first update.
    pub initial_objective: f64,
    /// Mean objective over the training set after each epoch.
    pub epoch_objectives: Vec<f64>,
}

impl EncoderPair {
    /// Uniform init in `[-1/sqrt(F), 1/sqrt(F)]`; key and query matrices are
    /// drawn from separate ChaCha streams of the same seed.
    pub fn new(dim: usize, feature_dim: usize, seed: u64) -> Self {
        assert!(dim >= 1 && feature_dim >= 1, "dimensions must be positive");
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let draw = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            (0..dim * feature_dim)
                .map(|_| rng.random_range(-bound..=bound))
                .collect::<Vec<f64>>()
        };
        Self {
            dim,
            feature_dim,
            seed,
            w_key: draw(0),
            w_query: draw(1),
        }
    }

    /// Both encoders share the key matrix of [`EncoderPair::new`], so scores
    /// follow token overlap. A usable retriever before any training.
    pub fn tied(dim: usize, feature_dim: usize, seed: u64) -> Self {
        let mut pair = Self::new(dim, feature_dim, seed);
        pair.w_query = pair.w_key.clone();
        pair
    }

    pub fn from_matrices(
        dim: usize,
        feature_dim: usize,
        seed: u64,
        w_key: Vec<f64>,
        w_query: Vec<f64>,
    ) -> Result<Self, EncoderError> {
        check_dim(dim * feature_dim, w_key.len())?;
        check_dim(dim * feature_dim, w_query.len())?;
        if w_key.iter().chain(&w_query).any(|v| !v.is_finite()) {
            return Err(EncoderError::BadModelFile("non-finite parameter".into()));
        }
        Ok(Self {
            dim,
            feature_dim,
            seed,
            w_key,
            w_query,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key_matrix(&self) -> &[f64] {
        &self.w_key
    }

    pub fn query_matrix(&self) -> &[f64] {
        &self.w_query
    }

    pub fn featurize_text(&self, text: &str) -> FeatureVector {
        featurize(&tokenize(text), self.feature_dim)
    }

    pub fn embed_key(&self, fv: &FeatureVector) -> Result<Embedding, EncoderError> {
        check_dim(self.feature_dim, fv.len())?;
        Ok(self.project(&self.w_key, &fv.nonzeros()))
    }

    pub fn embed_query(&self, fv: &FeatureVector) -> Result<Embedding, EncoderError> {
        check_dim(self.feature_dim, fv.len())?;
        Ok(self.project(&self.w_query, &fv.nonzeros()))
    }

    pub fn embed_key_text(&self, text: &str) -> Embedding {
        self.project(&self.w_key, &self.featurize_text(text).nonzeros())
    }

    pub fn embed_query_text(&self, text: &str) -> Embedding {
        self.project(&self.w_query, &self.featurize_text(text).nonzeros())
    }

    // Skipping zero features keeps the summation order of the dense product,
    // so results are bit-identical to it.
    fn project(&self, w: &[f64], x: &SparseFeatures) -> Embedding {
        let f = self.feature_dim;
        Embedding(
            (0..self.dim)
                .map(|row| {
                    let r = &w[row * f..(row + 1) * f];
                    x.0.iter().map(|&(j, v)| r[j] * v).sum()
                })
                .collect(),
        )
    }

    /// Analytic gradient of the objective for one example.
    pub fn objective_gradient(&self, example: &TrainingExample) -> Result<Gradients, EncoderError> {
        let prepared = self.prepare(example);
        let mut grads = Gradients {
            key: vec![0.0; self.w_key.len()],
            query: vec![0.0; self.w_query.len()],
        };
        let terms = self.gradient_terms(&prepared);
        let f = self.feature_dim;
        for (row, dq) in terms.d_query.iter().enumerate() {
            for &(j, x) in &prepared.query.0 {
                grads.query[row * f + j] += dq * x;
            }
        }
        for (coeff, keys) in terms.key_coeffs.iter().zip(&prepared.keys) {
            for (row, q) in terms.q.iter().enumerate() {
                for &(j, y) in &keys.0 {
                    grads.key[row * f + j] += coeff * q * y;
                }
            }
        }
        Ok(grads)
    }

    /// Objective value of one example under the current parameters.
    pub fn example_objective(&self, example: &TrainingExample) -> f64 {
        let prepared = self.prepare(example);
        self.gradient_terms(&prepared).objective
    }

    fn prepare(&self, example: &TrainingExample) -> PreparedExample {
        PreparedExample {
            query: self.featurize_text(&example.query_text).nonzeros(),
            keys: std::iter::once(&example.positive_text)
                .chain(&example.negative_texts)
                .map(|t| self.featurize_text(t).nonzeros())
                .collect(),
        }
    }

    fn gradient_terms(&self, ex: &PreparedExample) -> GradientTerms {
        let q = self.project(&self.w_query, &ex.query);
        let keys: Vec<Embedding> = ex
            .keys
            .iter()
            .map(|k| self.project(&self.w_key, k))
            .collect();
        let scores: Vec<f64> = keys.iter().map(|e| dot(&q.0, &e.0)).collect();
        let lse = log_sum_exp(&scores);
        let objective = scores[0] - lse;
        // dl/ds_i = [i == 0] - softmax_i
        let key_coeffs: Vec<f64> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| if i == 0 { 1.0 } else { 0.0 } - (s - lse).exp())
            .collect();
        let mut d_query = vec![0.0; self.dim];
        for (coeff, e) in key_coeffs.iter().zip(&keys) {
            for (acc, v) in d_query.iter_mut().zip(&e.0) {
                *acc += coeff * v;
            }
        }
        GradientTerms {
            objective,
            q: q.0,
            d_query,
            key_coeffs,
        }
    }

    fn ascend(&mut self, ex: &PreparedExample, lr: f64) {
        let terms = self.gradient_terms(ex);
        let f = self.feature_dim;
        for (row, dq) in terms.d_query.iter().enumerate() {
            for &(j, x) in &ex.query.0 {
                self.w_query[row * f + j] += lr * dq * x;
            }
        }
        for (coeff, keys) in terms.key_coeffs.iter().zip(&ex.keys) {
            for (row, q) in terms.q.iter().enumerate() {
                let scale = lr * coeff * q;
                for &(j, y) in &keys.0 {
                    self.w_key[row * f + j] += scale * y;
                }
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.w_key
            .iter()
            .chain(&self.w_query)
            .all(|v| v.is_finite())
    }

    /// Stochastic gradient ascent, one example per step, reshuffled each
    /// epoch from `seed`. The pair is left untouched when an update goes
    /// non-finite.
    pub fn train(
        &mut self,
        data: &[TrainingExample],
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<TrainingReport, EncoderError> {
        if epochs == 0 {
            return Err(EncoderError::InvalidTraining(
                "epochs must be at least 1".into(),
            ));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(EncoderError::InvalidTraining(
                "learning rate must be positive".into(),
            ));
        }
        if data.is_empty() {
            return Err(EncoderError::InvalidTraining("no training examples".into()));
        }
        let prepared: Vec<PreparedExample> = data.iter().map(|ex| self.prepare(ex)).collect();
        let mean_objective = |enc: &EncoderPair| {
            prepared
                .iter()
                .map(|ex| enc.gradient_terms(ex).objective)
                .sum::<f64>()
                / prepared.len() as f64
        };

        let mut work = self.clone();
        let initial_objective = mean_objective(&work);
        let mut epoch_objectives = Vec::with_capacity(epochs);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                work.ascend(&prepared[i], lr);
            }
            if !work.is_finite() {
                return Err(EncoderError::NonFiniteUpdate { epoch });
            }
            epoch_objectives.push(mean_objective(&work));
        }
        *self = work;
        Ok(TrainingReport {
            epochs,
            learning_rate: lr,
            initial_objective,
            epoch_objectives,
        })
    }

    /// Writes the model container. See `docs/formats.md` for the layout.
    pub fn save<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for v in self.w_key.iter().chain(&self.w_query) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 16 * self.w_key.len());
        self.save(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Format version plus FNV-1a-64 of the serialized model.
    pub fn fingerprint(&self) -> String {
        format!(
            "fragenc-v{MODEL_VERSION}-{:016x}",
            crate::corpus::fnv1a64(&self.to_bytes())
        )
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, EncoderError> {
        let bad = |e: std::io::Error| EncoderError::BadModelFile(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MODEL_MAGIC {
            return Err(EncoderError::BadModelFile("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32, EncoderError> {
            r.read_exact(&mut u32buf).map_err(bad)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(EncoderError::BadModelFile(format!(
                "unsupported version {version}"
            )));
        }
        let dim = read_u32(&mut r)? as usize;
        let feature_dim = read_u32(&mut r)? as usize;
        if dim == 0 || feature_dim == 0 {
            return Err(EncoderError::BadModelFile("zero dimension".into()));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(bad)?;
        let seed = u64::from_le_bytes(u64buf);
        let read_matrix = |r: &mut R| -> Result<Vec<f64>, EncoderError> {
            let mut bytes = vec![0u8; dim * feature_dim * 8];
            r.read_exact(&mut bytes).map_err(bad)?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let w_key = read_matrix(&mut r)?;
        let w_query = read_matrix(&mut r)?;
        Self::from_matrices(dim, feature_dim, seed, w_key, w_query)
    }
}

impl Default for EncoderPair {
    fn default() -> Self {
        Self::new(DEFAULT_EMBEDDING_DIM, DEFAULT_FEATURE_DIM, DEFAULT_SEED)
    }
}

struct PreparedExample {
    query: SparseFeatures,
    /// Positive first, then negatives.
    keys: Vec<SparseFeatures>,
}

struct GradientTerms {
    objective: f64,
    q: Vec<f64>,
    d_query: Vec<f64>,
    key_coeffs: Vec<f64>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Contrastive objective for already-computed embeddings.
pub fn objective(
    q: &Embedding,
    positive: &Embedding,
    negatives: &[Embedding],
) -> Result<f64, EncoderError> {
    check_dim(q.dim(), positive.dim())?;
    for n in negatives {
        check_dim(q.dim(), n.dim())?;
    }
    let scores: Vec<f64> = std::iter::once(positive)
        .chain(negatives)
        .map(|e| dot(&q.0, &e.0))
        .collect();
    Ok(scores[0] - log_sum_exp(&scores))
}

/// Reads a JSONL file of training examples.
pub fn read_training_examples<R: std::io::BufRead>(
    reader: R,
) -> Result<Vec<TrainingExample>, crate::corpus::CorpusError> {
    crate::corpus::read_lines(reader, |line| {
        serde_json::from_str::<TrainingExample>(line).map_err(|e| e.to_string())
    })
}
