//! Feature extraction: hashed bag-of-tokens over text, or precomputed
//! embeddings carried in the dataset.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::Scalar;

pub const DEFAULT_HASH_DIM: usize = 1 << 15;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("sample `{0}` has no embedding but features.mode = \"embedding\"")]
    MissingEmbedding(String),
    #[error("dataset carries no embeddings")]
    NoEmbeddings,
    #[error("feature dimension must be positive")]
    ZeroDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    HashedText,
    PrecomputedEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Embeddings when the dataset has them, hashed text otherwise.
    #[default]
    Auto,
    Hashed,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub mode: FeatureMode,
    pub hash_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            mode: FeatureMode::Auto,
            hash_dim: DEFAULT_HASH_DIM,
        }
    }
}

impl FeatureConfig {
    pub fn resolve(&self, dataset: &Dataset) -> FeatureSource {
        match self.mode {
            FeatureMode::Hashed => FeatureSource::HashedText,
            FeatureMode::Embedding => FeatureSource::PrecomputedEmbedding,
            FeatureMode::Auto if dataset.embedding_dim().is_some() => FeatureSource::PrecomputedEmbedding,
            FeatureMode::Auto => FeatureSource::HashedText,
        }
    }
}

/// Dense feature vector as seen by the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T> {
    pub values: Vec<T>,
    pub source: FeatureSource,
}

/// One row of a feature matrix. Hashed text is stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureRow<T> {
    Dense(Vec<T>),
    Sparse { indices: Vec<u32>, values: Vec<T> },
}

impl<T: Scalar> FeatureRow<T> {
    pub fn dot(&self, weights: &[T]) -> T {
        match self {
            FeatureRow::Dense(v) => v.iter().zip(weights).fold(T::zero(), |acc, (&x, &w)| acc + x * w),
            FeatureRow::Sparse { indices, values } => indices
                .iter()
                .zip(values)
                .fold(T::zero(), |acc, (&i, &x)| acc + x * weights[i as usize]),
        }
    }

    /// `target += scale * self`
    pub fn add_scaled_to(&self, scale: T, target: &mut [T]) {
        match self {
            FeatureRow::Dense(v) => {
                for (t, &x) in target.iter_mut().zip(v) {
                    *t = *t + scale * x;
                }
            }
            FeatureRow::Sparse { indices, values } => {
                for (&i, &x) in indices.iter().zip(values) {
                    let t = &mut target[i as usize];
                    *t = *t + scale * x;
                }
            }
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<T> {
        match self {
            FeatureRow::Dense(v) => v.clone(),
            FeatureRow::Sparse { indices, values } => {
                let mut out = vec![T::zero(); dim];
                for (&i, &x) in indices.iter().zip(values) {
                    out[i as usize] = x;
                }
                out
            }
        }
    }
}

/// Feature rows aligned with the sample order of a [`Dataset`].
#[derive(Debug, Clone)]
pub struct FeatureMatrix<T> {
    dim: usize,
    source: FeatureSource,
    rows: Vec<FeatureRow<T>>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn build(dataset: &Dataset, config: &FeatureConfig) -> Result<Self, FeatureError> {
        match config.resolve(dataset) {
            FeatureSource::HashedText => {
                if config.hash_dim == 0 {
                    return Err(FeatureError::ZeroDim);
                }
                let rows = dataset
                    .samples()
                    .iter()
                    .map(|s| hashed_row(&s.text, config.hash_dim))
                    .collect();
                Ok(FeatureMatrix {
                    dim: config.hash_dim,
                    source: FeatureSource::HashedText,
                    rows,
                })
            }
            FeatureSource::PrecomputedEmbedding => {
                let dim = dataset.embedding_dim().ok_or(FeatureError::NoEmbeddings)?;
                let rows = dataset
                    .samples()
                    .iter()
                    .map(|s| {
                        let emb = s
                            .embedding
                            .as_ref()
                            .ok_or_else(|| FeatureError::MissingEmbedding(s.id.clone()))?;
                        Ok(FeatureRow::Dense(emb.iter().map(|&v| T::lit(v)).collect()))
                    })
                    .collect::<Result<_, FeatureError>>()?;
                Ok(FeatureMatrix {
                    dim,
                    source: FeatureSource::PrecomputedEmbedding,
                    rows,
                })
            }
        }
    }

    pub fn from_dense(rows: Vec<Vec<T>>) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == dim), "ragged feature rows");
        FeatureMatrix {
            dim,
            source: FeatureSource::PrecomputedEmbedding,
            rows: rows.into_iter().map(FeatureRow::Dense).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> FeatureSource {
        self.source
    }

    pub fn row(&self, index: usize) -> &FeatureRow<T> {
        &self.rows[index]
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vector(&self, index: usize) -> FeatureVector<T> {
        FeatureVector {
            values: self.rows[index].to_dense(self.dim),
            source: self.source,
        }
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// 64-bit FNV-1a. Stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn token_bucket(token: &str, dim: usize) -> usize {
    (fnv1a(token.as_bytes()) % dim as u64) as usize
}

fn hashed_row<T: Scalar>(text: &str, dim: usize) -> FeatureRow<T> {
    let mut counts = std::collections::BTreeMap::<u32, u32>::new();
    for tok in tokenize(text) {
        *counts.entry(token_bucket(&tok, dim) as u32).or_default() += 1;
    }
    let norm = counts.values().map(|&c| f64::from(c).powi(2)).sum::<f64>().sqrt();
    let (indices, values) = counts
        .into_iter()
        .map(|(i, c)| (i, T::lit(f64::from(c) / norm)))
        .unzip();
    FeatureRow::Sparse { indices, values }
}

/// L2-normalized hashed bag of tokens. Empty text gives the zero vector.
pub fn featurize<T: Scalar>(text: &str, dim: usize) -> FeatureVector<T> {
    FeatureVector {
        values: hashed_row::<T>(text, dim).to_dense(dim),
        source: FeatureSource::HashedText,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn empty_text_is_zero() {
        let v = featurize::<f64>("", 64);
        assert!(v.values.iter().all(|&x| x == 0.0));
        assert_eq!(v.values.len(), 64);
    }

    #[test]
    fn repeated_tokens_normalize_to_same_vector() {
        let a = featurize::<f64>("hate hate", DEFAULT_HASH_DIM);
        let b = featurize::<f64>("hate", DEFAULT_HASH_DIM);
        assert_eq!(a, b);
        let norm: f64 = a.values.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenization_is_case_and_punctuation_insensitive() {
        assert_eq!(
            featurize::<f64>("Hello, WORLD!", 512),
            featurize::<f64>("hello world", 512)
        );
    }

    #[test]
    fn distinct_words_rarely_collide() {
        let dim = DEFAULT_HASH_DIM;
        assert_ne!(featurize::<f64>("hate", dim), featurize::<f64>("love", dim));

        let words: Vec<String> = (0..2000).map(|i| format!("word{i}")).collect();
        let buckets: Vec<usize> = words.iter().map(|w| token_bucket(w, dim)).collect();
        let distinct = buckets.iter().collect::<HashSet<_>>().len();
        let collisions = words.len() - distinct;
        // Birthday bound: n^2 / 2d ~= 61 expected colliding pairs.
        let expected = (words.len() * words.len()) as f64 / (2.0 * dim as f64);
        assert!((collisions as f64) < 2.0 * expected, "{collisions} collisions");
    }

    #[test]
    fn sparse_and_dense_rows_agree() {
        let row = hashed_row::<f64>("a b c a", 16);
        let dense = FeatureRow::Dense(row.to_dense(16));
        let w: Vec<f64> = (0..16).map(|i| i as f64 * 0.25 - 1.0).collect();
        assert!((row.dot(&w) - dense.dot(&w)).abs() < 1e-15);
        let mut g1 = vec![0.0; 16];
        let mut g2 = vec![0.0; 16];
        row.add_scaled_to(0.5, &mut g1);
        dense.add_scaled_to(0.5, &mut g2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
