//! Linear-logistic classifier `g(x) = σ(w·x + b)` and its full-batch
//! gradient-descent trainer.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::eval::{self, Metrics};
use crate::features::{FeatureMatrix, FeatureRow};
use crate::loss::{pnu_loss_and_gradient, LossBreakdown, LossConfig, TrainingPools};
use crate::Scalar;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ClassifierError {
    #[error("feature dimension {found} does not match classifier dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("training needs at least one labeled sample")]
    EmptyLabeled,
    #[error("loss became non-finite at epoch {epoch}; the learning rate is probably too large")]
    Diverged { epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct ClassifierParams<T> {
    pub weights: Vec<T>,
    pub bias: T,
    pub version: u64,
}

impl<T: Scalar> ClassifierParams<T> {
    pub fn zeros(dim: usize) -> Self {
        ClassifierParams {
            weights: vec![T::zero(); dim],
            bias: T::zero(),
            version: 0,
        }
    }

    pub fn from_parts(weights: Vec<T>, bias: T) -> Self {
        ClassifierParams {
            weights,
            bias,
            version: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    pub fn logit(&self, row: &FeatureRow<T>) -> T {
        row.dot(&self.weights) + self.bias
    }

    /// Clamped probability for a matrix row.
    pub fn proba_row(&self, row: &FeatureRow<T>) -> T {
        clamp_probability(logistic(self.logit(row)))
    }

    pub fn predict_rows(&self, features: &FeatureMatrix<T>, rows: &[usize]) -> Vec<T> {
        rows.iter().map(|&r| self.proba_row(features.row(r))).collect()
    }

    /// Bitwise equality, including the sign of zeros and NaN payloads.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let bits = |v: T| v.to_f64().map(f64::to_bits);
        self.version == other.version
            && bits(self.bias) == bits(other.bias)
            && self.weights.len() == other.weights.len()
            && self.weights.iter().zip(&other.weights).all(|(&a, &b)| bits(a) == bits(b))
    }
}

/// Numerically stable logistic function.
pub fn logistic<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn clamp_probability<T: Scalar>(p: T) -> T {
    let eps = T::prob_eps();
    p.max(eps).min(T::one() - eps)
}

/// `σ(w·x + b)` clamped to `[ε, 1 − ε]`.
pub fn predict_proba<T: Scalar>(params: &ClassifierParams<T>, features: &[T]) -> Result<T, ClassifierError> {
    if features.len() != params.dim() {
        return Err(ClassifierError::DimensionMismatch {
            expected: params.dim(),
            found: features.len(),
        });
    }
    let z = features
        .iter()
        .zip(&params.weights)
        .fold(params.bias, |acc, (&x, &w)| acc + x * w);
    Ok(clamp_probability(logistic(z)))
}

/// `max(p, 1 − p)`: how far the prediction is from the decision boundary.
pub fn confidence<T: Scalar>(p: T) -> T {
    p.max(T::one() - p)
}

pub fn hard_label<T: Scalar>(p: T) -> Label {
    Label::from_bool(p >= T::lit(0.5))
}

/// Labeled evaluation split used for epoch and round selection.
#[derive(Debug, Clone, Default)]
pub struct DevSet {
    pub rows: Vec<usize>,
    pub golds: Vec<Label>,
}

impl DevSet {
    pub fn evaluate<T: Scalar>(&self, params: &ClassifierParams<T>, features: &FeatureMatrix<T>) -> Option<Metrics> {
        if self.rows.is_empty() {
            return None;
        }
        let preds: Vec<Label> = params
            .predict_rows(features, &self.rows)
            .into_iter()
            .map(hard_label)
            .collect();
        eval::metrics(&preds, &self.golds).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct EpochRecord<T> {
    pub epoch: usize,
    pub loss: LossBreakdown<T>,
    pub dev: Option<Metrics>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ClassifierParams<T>,
    /// 1-based epoch the returned params come from; 0 when no epoch ran.
    pub best_epoch: usize,
    pub history: Vec<EpochRecord<T>>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn best_record(&self) -> Option<&EpochRecord<T>> {
        self.best_epoch.checked_sub(1).and_then(|i| self.history.get(i))
    }
}

/// Index of the best dev score; ties go to the earlier epoch. Epochs without
/// a score rank below any scored epoch; with no scores at all the last
/// epoch wins.
pub fn select_best_epoch(scores: &[Option<f64>]) -> Option<usize> {
    if scores.iter().all(Option::is_none) {
        return scores.len().checked_sub(1);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings<T> {
    pub epochs: usize,
    pub learning_rate: T,
}

/// Full-batch gradient descent on the PNU objective.
///
/// Returns the parameters after the epoch with the best dev Macro-F1. The
/// starting point itself is not a candidate unless `epochs == 0`, in which
/// case `init` comes back untouched.
pub fn train<T: Scalar>(
    init: &ClassifierParams<T>,
    features: &FeatureMatrix<T>,
    pools: &TrainingPools,
    loss: &LossConfig<T>,
    settings: TrainSettings<T>,
    dev: &DevSet,
) -> Result<TrainOutcome<T>, ClassifierError> {
    if pools.labeled_len() == 0 {
        return Err(ClassifierError::EmptyLabeled);
    }
    if init.dim() != features.dim() {
        return Err(ClassifierError::DimensionMismatch {
            expected: init.dim(),
            found: features.dim(),
        });
    }
    if settings.epochs == 0 {
        return Ok(TrainOutcome {
            params: init.clone(),
            best_epoch: 0,
            history: Vec::new(),
        });
    }

    let mut current = init.clone();
    let (_, mut grad) = pnu_loss_and_gradient(&current, features, pools, loss);
    let mut history = Vec::with_capacity(settings.epochs);
    let mut best: Option<(f64, ClassifierParams<T>)> = None;
    let mut last = current.clone();

    for epoch in 1..=settings.epochs {
        for (w, g) in current.weights.iter_mut().zip(&grad.weights) {
            *w = *w - settings.learning_rate * *g;
        }
        current.bias = current.bias - settings.learning_rate * grad.bias;

        let (breakdown, next_grad) = pnu_loss_and_gradient(&current, features, pools, loss);
        if !breakdown.total.is_finite() || !current.is_finite() {
            return Err(ClassifierError::Diverged { epoch });
        }
        grad = next_grad;

        let dev_metrics = dev.evaluate(&current, features);

        let score = dev_metrics.map(|m| m.macro_f1);
        match (&best, score) {
            (None, Some(s)) => best = Some((s, current.clone())),
            (Some((b, _)), Some(s)) if s > *b => best = Some((s, current.clone())),
            _ => {}
        }
        if epoch == settings.epochs {
            last = current.clone();
        }
        history.push(EpochRecord {
            epoch,
            loss: breakdown,
            dev: dev_metrics,
        });
    }

    let scores: Vec<Option<f64>> = history.iter().map(|r| r.dev.map(|m| m.macro_f1)).collect();
    let best_index = select_best_epoch(&scores).expect("at least one epoch ran");
    let mut params = match best {
        Some((_, p)) => p,
        None => last,
    };
    params.version = init.version + 1;
    Ok(TrainOutcome {
        params,
        best_epoch: best_index + 1,
        history,
    })
}
