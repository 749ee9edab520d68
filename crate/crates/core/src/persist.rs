//! Run-directory layout and checksummed snapshots.
//!
//! ```text
//! run_dir/
//!   config.toml                    configuration snapshot
//!   state.json                     resume pointer (checksummed)
//!   pools/round_NNNN.json          pool snapshot after round N (checksummed)
//!   checkpoints/round_NNNN.json    classifier after round N (checksummed)
//!   checkpoints/best.json          best-dev classifier so far (checksummed)
//!   reports/round_NNNN.json        round report (round 0 = initial training)
//!   transcripts/round_NNNN.jsonl   one negotiation transcript per line
//!   timings.tsv                    wall-clock seconds per round
//!   pseudo_label_quality.tsv       agreed pseudo-label Macro-F1 per round
//! ```
//!
//! Checksummed files start with a `# sha256:<hex>` line covering the JSON
//! body that follows.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adjudicator::Transcript;
use crate::classifier::ClassifierParams;
use crate::config::RunConfig;
use crate::features::FeatureConfig;
use crate::pipeline::RoundReport;
use crate::pool::{PoolError, PoolState};
use crate::Scalar;

const CHECKSUM_PREFIX: &str = "# sha256:";

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: checksum mismatch (file is corrupt or was edited)")]
    Checksum { path: PathBuf },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Pool(#[from] PoolError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn digest(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

/// Writes via a temporary sibling and rename so readers never see a torn file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PersistError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_checksummed<V: Serialize>(path: &Path, value: &V) -> Result<(), PersistError> {
    let body = serde_json::to_string_pretty(value).map_err(|e| PersistError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let text = format!("{CHECKSUM_PREFIX}{}\n{body}\n", digest(&body));
    write_atomic(path, text.as_bytes())
}

pub fn read_checksummed<V: DeserializeOwned>(path: &Path) -> Result<V, PersistError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let (header, body) = text.split_once('\n').ok_or_else(|| PersistError::Format {
        path: path.to_path_buf(),
        message: "missing checksum header".into(),
    })?;
    let expected = header.strip_prefix(CHECKSUM_PREFIX).ok_or_else(|| PersistError::Format {
        path: path.to_path_buf(),
        message: "missing checksum header".into(),
    })?;
    let body = body.strip_suffix('\n').unwrap_or(body);
    if digest(body) != expected.trim() {
        return Err(PersistError::Checksum {
            path: path.to_path_buf(),
        });
    }
    serde_json::from_str(body).map_err(|e| PersistError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Classifier checkpoint as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct Checkpoint<T> {
    pub dimension: usize,
    pub weights: Vec<T>,
    pub bias: T,
    pub version: u64,
    pub config_hash: String,
    pub features: FeatureConfig,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(params: &ClassifierParams<T>, config_hash: impl Into<String>, features: FeatureConfig) -> Self {
        Checkpoint {
            dimension: params.dim(),
            weights: params.weights.clone(),
            bias: params.bias,
            version: params.version,
            config_hash: config_hash.into(),
            features,
        }
    }

    pub fn params(&self) -> ClassifierParams<T> {
        ClassifierParams {
            weights: self.weights.clone(),
            bias: self.bias,
            version: self.version,
        }
    }
}

/// Where a run stands; enough to resume after the last completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config_hash: String,
    pub completed_round: u32,
    pub unlabeled_at_start: usize,
    pub best_dev_macro_f1: f64,
    pub best_round: u32,
    pub finished: bool,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, PersistError> {
        let root = root.into();
        for sub in ["pools", "checkpoints", "reports", "transcripts"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(RunDir { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self, PersistError> {
        let root = root.into();
        if !root.join("state.json").is_file() {
            return Err(PersistError::Io {
                path: root.join("state.json"),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a run directory"),
            });
        }
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn round_file(&self, dir: &str, round: u32, ext: &str) -> PathBuf {
        self.root.join(dir).join(format!("round_{round:04}.{ext}"))
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn write_config(&self, config: &RunConfig) -> Result<(), PersistError> {
        write_atomic(&self.config_path(), config.to_toml_string().as_bytes())
    }

    pub fn read_config(&self) -> Result<RunConfig, PersistError> {
        let path = self.config_path();
        RunConfig::load(&path).map_err(|e| PersistError::Format {
            path,
            message: e.to_string(),
        })
    }

    pub fn save_state(&self, state: &RunState) -> Result<(), PersistError> {
        write_checksummed(&self.root.join("state.json"), state)
    }

    pub fn load_state(&self) -> Result<RunState, PersistError> {
        read_checksummed(&self.root.join("state.json"))
    }

    pub fn save_pool(&self, pool: &PoolState) -> Result<(), PersistError> {
        write_checksummed(&self.round_file("pools", pool.round_number(), "json"), &pool.snapshot())
    }

    pub fn load_pool(&self, round: u32) -> Result<PoolState, PersistError> {
        let snap = read_checksummed(&self.round_file("pools", round, "json"))?;
        Ok(PoolState::from_snapshot(snap)?)
    }

    pub fn save_checkpoint<T: Scalar>(&self, round: u32, checkpoint: &Checkpoint<T>) -> Result<(), PersistError> {
        write_checksummed(&self.round_file("checkpoints", round, "json"), checkpoint)
    }

    pub fn load_checkpoint<T: Scalar>(&self, round: u32) -> Result<Checkpoint<T>, PersistError> {
        read_checksummed(&self.round_file("checkpoints", round, "json"))
    }

    pub fn best_checkpoint_path(&self) -> PathBuf {
        self.root.join("checkpoints").join("best.json")
    }

    pub fn save_best<T: Scalar>(&self, checkpoint: &Checkpoint<T>) -> Result<(), PersistError> {
        write_checksummed(&self.best_checkpoint_path(), checkpoint)
    }

    pub fn load_best<T: Scalar>(&self) -> Result<Checkpoint<T>, PersistError> {
        read_checksummed(&self.best_checkpoint_path())
    }

    pub fn report_path(&self, round: u32) -> PathBuf {
        self.round_file("reports", round, "json")
    }

    pub fn write_report(&self, report: &RoundReport) -> Result<(), PersistError> {
        let path = self.report_path(report.round_number);
        let mut body = serde_json::to_string_pretty(report).expect("report serializes");
        body.push('\n');
        write_atomic(&path, body.as_bytes())
    }

    pub fn read_report(&self, round: u32) -> Result<RoundReport, PersistError> {
        let path = self.report_path(round);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| PersistError::Format {
            path,
            message: e.to_string(),
        })
    }

    /// Round numbers with a report on disk, ascending.
    pub fn report_rounds(&self) -> Result<Vec<u32>, PersistError> {
        let dir = self.root.join("reports");
        let mut rounds = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(n) = name.strip_prefix("round_").and_then(|s| s.strip_suffix(".json")) {
                if let Ok(n) = n.parse() {
                    rounds.push(n);
                }
            }
        }
        rounds.sort_unstable();
        Ok(rounds)
    }

    pub fn write_transcripts(&self, round: u32, transcripts: &[Transcript]) -> Result<(), PersistError> {
        let path = self.round_file("transcripts", round, "jsonl");
        let mut buf = Vec::new();
        for t in transcripts {
            serde_json::to_writer(&mut buf, t).expect("transcript serializes");
            buf.push(b'\n');
        }
        write_atomic(&path, &buf)
    }

    pub fn read_transcripts(&self, round: u32) -> Result<Vec<Transcript>, PersistError> {
        let path = self.round_file("transcripts", round, "jsonl");
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        BufReader::new(file)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|line| {
                let line = line.map_err(io_err(&path))?;
                serde_json::from_str(&line).map_err(|e| PersistError::Format {
                    path: path.clone(),
                    message: e.to_string(),
                })
            })
            .collect()
    }

    pub fn append_timing(&self, round: u32, seconds: f64) -> Result<(), PersistError> {
        let path = self.root.join("timings.tsv");
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        if fresh {
            writeln!(f, "round\tseconds").map_err(io_err(&path))?;
        }
        writeln!(f, "{round}\t{seconds:.3}").map_err(io_err(&path))
    }

    pub fn quality_path(&self) -> PathBuf {
        self.root.join("pseudo_label_quality.tsv")
    }
}

/// Writes the pool snapshot, classifier checkpoint and report of one round.
pub fn persist_run_state<T: Scalar>(
    run_dir: &RunDir,
    pool: &PoolState,
    checkpoint: &Checkpoint<T>,
    report: &RoundReport,
) -> Result<(), PersistError> {
    run_dir.save_pool(pool)?;
    run_dir.save_checkpoint(pool.round_number(), checkpoint)?;
    run_dir.write_report(report)
}
