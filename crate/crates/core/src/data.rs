//! Samples, splits and JSONL dataset ingestion.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed sample: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate sample id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: embedding has length {found}, expected {expected}")]
    EmbeddingDim {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: embedding contains a non-finite value")]
    NonFinite { line: usize },
    #[error("line {line}: {split} sample `{id}` has no gold label")]
    MissingGold { line: usize, id: String, split: Split },
}

/// Binary class. `Positive` is the offensive / hateful / negative-sentiment side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn flip(self) -> Self {
        match self {
            Label::Positive => Label::Negative,
            Label::Negative => Label::Positive,
        }
    }

    pub fn as_u8(self) -> u8 {
        self.into()
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One classifiable item, exactly as it appears on a JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub text: String,
    #[serde(rename = "label")]
    pub gold_label: Option<Label>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
    index: HashMap<String, usize>,
    embedding_dim: Option<usize>,
}

impl Dataset {
    /// Builds a dataset from in-memory samples, applying the same checks as
    /// [`load_dataset`]. Line numbers in errors are 1-based positions.
    pub fn from_samples(samples: Vec<Sample>, declared_dim: Option<usize>) -> Result<Self, DataError> {
        let mut ds = Dataset {
            samples: Vec::with_capacity(samples.len()),
            index: HashMap::with_capacity(samples.len()),
            embedding_dim: declared_dim,
        };
        for (i, s) in samples.into_iter().enumerate() {
            ds.push(i + 1, s)?;
        }
        Ok(ds)
    }

    fn push(&mut self, line: usize, sample: Sample) -> Result<(), DataError> {
        if let Some(emb) = &sample.embedding {
            match self.embedding_dim {
                Some(expected) if expected != emb.len() => {
                    return Err(DataError::EmbeddingDim {
                        line,
                        expected,
                        found: emb.len(),
                    })
                }
                None => self.embedding_dim = Some(emb.len()),
                _ => {}
            }
            if emb.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { line });
            }
        }
        if sample.split != Split::Train && sample.gold_label.is_none() {
            return Err(DataError::MissingGold {
                line,
                id: sample.id,
                split: sample.split,
            });
        }
        if self.index.contains_key(&sample.id) {
            return Err(DataError::DuplicateId { line, id: sample.id });
        }
        self.index.insert(sample.id.clone(), self.samples.len());
        self.samples.push(sample);
        Ok(())
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embedding_dim
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index_of(id).map(|i| &self.samples[i])
    }

    /// Sample indices belonging to `split`, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_ids(&self, split: Split) -> Vec<&str> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id.as_str())
            .collect()
    }

    pub fn count_by_label(&self, split: Split) -> (usize, usize) {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .fold((0, 0), |(neg, pos), s| match s.gold_label {
                Some(Label::Positive) => (neg, pos + 1),
                Some(Label::Negative) => (neg + 1, pos),
                None => (neg, pos),
            })
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        write_samples(path, &self.samples)
    }
}

pub fn write_samples(path: &Path, samples: &[Sample]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Reads a JSONL dataset. Blank lines are skipped; every other line must be
/// one sample object.
pub fn load_dataset(path: &Path, declared_dim: Option<usize>) -> Result<Dataset, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut ds = Dataset {
        embedding_dim: declared_dim,
        ..Dataset::default()
    };
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        ds.push(line_no, sample)?;
    }
    Ok(ds)
}
