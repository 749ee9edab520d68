//! Accuracy, Macro-F1 and pseudo-label quality.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adjudicator::{Outcome, Transcript};
use crate::data::Label;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("predictions ({predictions}) and golds ({golds}) differ in length")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("cannot score an empty prediction set")]
    Empty,
}

/// Binary confusion matrix with `Positive` as the reference class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
}

impl Confusion {
    pub fn from_pairs(predictions: &[Label], golds: &[Label]) -> Result<Self, EvalError> {
        check(predictions, golds)?;
        let mut c = Confusion::default();
        for (&p, &g) in predictions.iter().zip(golds) {
            match (p, g) {
                (Label::Positive, Label::Positive) => c.tp += 1,
                (Label::Positive, Label::Negative) => c.fp += 1,
                (Label::Negative, Label::Negative) => c.tn += 1,
                (Label::Negative, Label::Positive) => c.r#fn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.r#fn
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// F1 of the positive class (`pos = true`) or the negative class.
    pub fn class_f1(&self, pos: bool) -> f64 {
        let (tp, fp, fn_) = if pos {
            (self.tp, self.fp, self.r#fn)
        } else {
            (self.tn, self.r#fn, self.fp)
        };
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            tracing::warn!(class = if pos { "positive" } else { "negative" }, "class absent from predictions and golds; F1 = 0");
            return 0.0;
        }
        (2 * tp) as f64 / denom as f64
    }

    pub fn macro_f1(&self) -> f64 {
        (self.class_f1(true) + self.class_f1(false)) / 2.0
    }
}

fn check(predictions: &[Label], golds: &[Label]) -> Result<(), EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn accuracy(predictions: &[Label], golds: &[Label]) -> Result<f64, EvalError> {
    Ok(Confusion::from_pairs(predictions, golds)?.accuracy())
}

/// Unweighted mean of the two per-class F1 scores. A class missing from
/// both predictions and golds scores 0.
pub fn macro_f1(predictions: &[Label], golds: &[Label]) -> Result<f64, EvalError> {
    Ok(Confusion::from_pairs(predictions, golds)?.macro_f1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
}

pub fn metrics(predictions: &[Label], golds: &[Label]) -> Result<Metrics, EvalError> {
    let c = Confusion::from_pairs(predictions, golds)?;
    Ok(Metrics {
        accuracy: c.accuracy(),
        macro_f1: c.macro_f1(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityPoint {
    pub round: u32,
    /// Agreed samples in the round that carry a gold label.
    pub count: usize,
    /// `None` when the round produced no scorable agreed samples.
    pub macro_f1: Option<f64>,
}

/// Macro-F1 of the agreed pseudo-labels of each round against gold.
///
/// `rounds` holds `(round_number, transcripts)`. Agreed samples without a gold
/// label are skipped with a notice; a round left with nothing to score is
/// reported with `macro_f1 = None`.
pub fn pseudo_label_quality<'a, I>(rounds: I, golds: &HashMap<String, Label>) -> Vec<QualityPoint>
where
    I: IntoIterator<Item = (u32, &'a [Transcript])>,
{
    rounds
        .into_iter()
        .map(|(round, transcripts)| {
            let mut preds = Vec::new();
            let mut truth = Vec::new();
            let mut missing = 0usize;
            for t in transcripts {
                let pseudo = match t.outcome {
                    Outcome::AgreedPositive => Label::Positive,
                    Outcome::AgreedNegative => Label::Negative,
                    Outcome::Disagreed => continue,
                };
                match golds.get(&t.sample_id) {
                    Some(&g) => {
                        preds.push(pseudo);
                        truth.push(g);
                    }
                    None => missing += 1,
                }
            }
            if missing > 0 {
                tracing::info!(round, missing, "agreed samples without gold label skipped");
            }
            QualityPoint {
                round,
                count: preds.len(),
                macro_f1: macro_f1(&preds, &truth).ok(),
            }
        })
        .collect()
}

/// Writes the series as a tab-separated table with header
/// `round	count	macro_f1`; absent values are left empty.
pub fn write_quality_tsv(path: &Path, series: &[QualityPoint]) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "round\tcount\tmacro_f1")?;
    for p in series {
        match p.macro_f1 {
            Some(f) => writeln!(out, "{}\t{}\t{:.6}", p.round, p.count, f)?,
            None => writeln!(out, "{}\t{}\t", p.round, p.count)?,
        }
    }
    out.flush()
}

/// Least-squares slope of `ys` against `xs`; `None` with fewer than two
/// distinct x values.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs[..n].iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs[..n].iter().zip(&ys[..n]).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}
