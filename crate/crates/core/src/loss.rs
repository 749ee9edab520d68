//! The PNU risk family over the pool partition, with analytic gradients for
//! the linear-logistic classifier.
//!
//! Every risk is built from per-pool mean cross-entropies `L_pool^y`: the mean
//! of `ℓ(g(x), y)` over one pool for one target `y`. An empty pool has mean 0,
//! so round 0 (no unknown pools yet) reduces to plain PN learning.
//!
//! * PN:      `π_p L_lp^{y_p} + π_n L_ln^{y_n}`
//! * soft-PN: `π_p L_ap^{ŷ_p} + π_n L_an^{ŷ_n}`
//! * PU:      `π_p (L_lp^{y_p} + L_ap^{ŷ_p}) + max(0, L_du^{y_n} − π_p (L_lp^{y_n} + L_ap^{ŷ_n}))`
//! * NU:      `π_n (L_ln^{y_n} + L_an^{ŷ_n}) + max(0, L_du^{y_p} − π_n (L_ln^{y_p} + L_an^{ŷ_p}))`
//! * PNU:     `(1−γ)(PN + soft-PN) + γ PU` for `γ ≥ 0`, `(1+γ)(PN + soft-PN) − γ NU` otherwise
//!
//! Pools: `lp`/`ln` labeled positive/negative, `ap`/`an` agreed-unknown
//! positive/negative, `du` disagreed-unknown.

use serde::{Deserialize, Serialize};

use crate::classifier::{logistic, ClassifierParams};
use crate::data::Dataset;
use crate::features::FeatureMatrix;
use crate::pool::{LabelState, PoolState};
use crate::Scalar;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("gamma must lie in [-1, 1], got {0}")]
    Gamma(f64),
    #[error("pi_p must lie in (0, 1), got {0}")]
    Prior(f64),
    #[error("soft targets must satisfy 0 < y_hat_n < y_hat_p < 1, got y_hat_p = {y_hat_p}, y_hat_n = {y_hat_n}")]
    SoftTargets { y_hat_p: f64, y_hat_n: f64 },
}

/// Weights and targets of the PNU objective. `π_n = 1 − π_p`, `y_p = 1` and
/// `y_n = 0` are derived rather than stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct LossConfig<T> {
    pub gamma: T,
    pub pi_p: T,
    pub y_hat_p: T,
    pub y_hat_n: T,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig {
            gamma: T::lit(0.1),
            pi_p: T::lit(0.5),
            y_hat_p: T::lit(0.67),
            y_hat_n: T::lit(0.33),
        }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn new(gamma: T, pi_p: T, y_hat_p: T, y_hat_n: T) -> Result<Self, LossError> {
        let cfg = LossConfig {
            gamma,
            pi_p,
            y_hat_p,
            y_hat_n,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        if !(self.gamma >= -T::one() && self.gamma <= T::one()) {
            return Err(LossError::Gamma(f(self.gamma)));
        }
        if !(self.pi_p > T::zero() && self.pi_p < T::one()) {
            return Err(LossError::Prior(f(self.pi_p)));
        }
        if !(T::zero() < self.y_hat_n && self.y_hat_n < self.y_hat_p && self.y_hat_p < T::one()) {
            return Err(LossError::SoftTargets {
                y_hat_p: f(self.y_hat_p),
                y_hat_n: f(self.y_hat_n),
            });
        }
        Ok(())
    }

    pub fn pi_n(&self) -> T {
        T::one() - self.pi_p
    }

    pub fn y_p(&self) -> T {
        T::one()
    }

    pub fn y_n(&self) -> T {
        T::zero()
    }

    pub fn with_gamma(mut self, gamma: T) -> Self {
        self.gamma = gamma;
        self
    }
}

/// Row indices (into a [`FeatureMatrix`]) of the five pools that carry loss.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainingPools {
    pub labeled_pos: Vec<usize>,
    pub labeled_neg: Vec<usize>,
    pub agreed_pos: Vec<usize>,
    pub agreed_neg: Vec<usize>,
    pub disagreed: Vec<usize>,
}

impl TrainingPools {
    /// Resolves pool ids against the dataset. Ids are taken in sorted order.
    pub fn gather(pool: &PoolState, dataset: &Dataset) -> Self {
        let rows = |state| {
            pool.ids(state)
                .iter()
                .map(|id| dataset.index_of(id).expect("pool id present in dataset"))
                .collect()
        };
        TrainingPools {
            labeled_pos: rows(LabelState::LabeledPositive),
            labeled_neg: rows(LabelState::LabeledNegative),
            agreed_pos: rows(LabelState::AgreedUnknownPositive),
            agreed_neg: rows(LabelState::AgreedUnknownNegative),
            disagreed: rows(LabelState::DisagreedUnknown),
        }
    }

    /// The same pools with every unknown pool emptied.
    pub fn labeled_only(&self) -> Self {
        TrainingPools {
            labeled_pos: self.labeled_pos.clone(),
            labeled_neg: self.labeled_neg.clone(),
            ..Default::default()
        }
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled_pos.len() + self.labeled_neg.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct LossBreakdown<T> {
    pub total: T,
    pub pn: T,
    pub soft_pn: T,
    pub pu: T,
    pub nu: T,
    /// Argument of the max(0, ·) in the PU risk.
    pub pu_negative_risk: T,
    /// Argument of the max(0, ·) in the NU risk.
    pub nu_positive_risk: T,
    pub pu_clamped: bool,
    pub nu_clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub weights: Vec<T>,
    pub bias: T,
}

/// Cross-entropy of a (pre-clamped) probability against a target in [0, 1].
pub fn point_loss<T: Scalar>(p: T, y: T) -> T {
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

/// Clamped probability and whether the clamp was hit, per row.
fn probabilities<T: Scalar>(params: &ClassifierParams<T>, features: &FeatureMatrix<T>, rows: &[usize]) -> Vec<(T, bool)> {
    rows.iter()
        .map(|&r| {
            let raw = logistic(params.logit(features.row(r)));
            let eps = T::prob_eps();
            if raw < eps {
                (eps, true)
            } else if raw > T::one() - eps {
                (T::one() - eps, true)
            } else {
                (raw, false)
            }
        })
        .collect()
}

fn mean_of<T: Scalar>(probs: &[(T, bool)], y: T) -> T {
    if probs.is_empty() {
        return T::zero();
    }
    let sum = probs.iter().fold(T::zero(), |acc, &(p, _)| acc + point_loss(p, y));
    sum / T::from_usize(probs.len()).unwrap()
}

/// Mean cross-entropy of one pool against `target`; 0 for an empty pool.
pub fn mean_pool_loss<T: Scalar>(params: &ClassifierParams<T>, features: &FeatureMatrix<T>, rows: &[usize], target: T) -> T {
    mean_of(&probabilities(params, features, rows), target)
}

#[derive(Debug, Clone, Copy)]
enum PoolId {
    LabeledPos,
    LabeledNeg,
    AgreedPos,
    AgreedNeg,
    Disagreed,
}

struct PoolProbs<T> {
    lp: Vec<(T, bool)>,
    ln: Vec<(T, bool)>,
    ap: Vec<(T, bool)>,
    an: Vec<(T, bool)>,
    du: Vec<(T, bool)>,
}

impl<T: Scalar> PoolProbs<T> {
    fn new(params: &ClassifierParams<T>, features: &FeatureMatrix<T>, pools: &TrainingPools) -> Self {
        PoolProbs {
            lp: probabilities(params, features, &pools.labeled_pos),
            ln: probabilities(params, features, &pools.labeled_neg),
            ap: probabilities(params, features, &pools.agreed_pos),
            an: probabilities(params, features, &pools.agreed_neg),
            du: probabilities(params, features, &pools.disagreed),
        }
    }

    fn get(&self, id: PoolId) -> &[(T, bool)] {
        match id {
            PoolId::LabeledPos => &self.lp,
            PoolId::LabeledNeg => &self.ln,
            PoolId::AgreedPos => &self.ap,
            PoolId::AgreedNeg => &self.an,
            PoolId::Disagreed => &self.du,
        }
    }

    fn mean(&self, id: PoolId, y: T) -> T {
        mean_of(self.get(id), y)
    }

    fn breakdown(&self, cfg: &LossConfig<T>) -> LossBreakdown<T> {
        use PoolId::*;
        let (pi_p, pi_n) = (cfg.pi_p, cfg.pi_n());
        let (y_p, y_n, yh_p, yh_n) = (cfg.y_p(), cfg.y_n(), cfg.y_hat_p, cfg.y_hat_n);

        let pn = pi_p * self.mean(LabeledPos, y_p) + pi_n * self.mean(LabeledNeg, y_n);
        let soft_pn = pi_p * self.mean(AgreedPos, yh_p) + pi_n * self.mean(AgreedNeg, yh_n);

        let pu_negative_risk =
            self.mean(Disagreed, y_n) - pi_p * (self.mean(LabeledPos, y_n) + self.mean(AgreedPos, yh_n));
        let pu = pi_p * (self.mean(LabeledPos, y_p) + self.mean(AgreedPos, yh_p)) + pu_negative_risk.max(T::zero());

        let nu_positive_risk =
            self.mean(Disagreed, y_p) - pi_n * (self.mean(LabeledNeg, y_p) + self.mean(AgreedNeg, yh_p));
        let nu = pi_n * (self.mean(LabeledNeg, y_n) + self.mean(AgreedNeg, yh_n)) + nu_positive_risk.max(T::zero());

        let g = cfg.gamma;
        let total = if g >= T::zero() {
            (T::one() - g) * (pn + soft_pn) + g * pu
        } else {
            (T::one() + g) * (pn + soft_pn) - g * nu
        };
        LossBreakdown {
            total,
            pn,
            soft_pn,
            pu,
            nu,
            pu_negative_risk,
            nu_positive_risk,
            pu_clamped: pu_negative_risk < T::zero(),
            nu_clamped: nu_positive_risk < T::zero(),
        }
    }

    /// `(pool, target, coefficient)` terms whose weighted means sum to the
    /// differentiable part of the PNU total. A max(0, ·) whose argument is
    /// not strictly positive contributes nothing.
    fn total_terms(&self, cfg: &LossConfig<T>, b: &LossBreakdown<T>) -> Vec<(PoolId, T, T)> {
        use PoolId::*;
        let (pi_p, pi_n) = (cfg.pi_p, cfg.pi_n());
        let (y_p, y_n, yh_p, yh_n) = (cfg.y_p(), cfg.y_n(), cfg.y_hat_p, cfg.y_hat_n);
        let g = cfg.gamma;
        let supervised = if g >= T::zero() { T::one() - g } else { T::one() + g };
        let mut terms = vec![
            (LabeledPos, y_p, supervised * pi_p),
            (LabeledNeg, y_n, supervised * pi_n),
            (AgreedPos, yh_p, supervised * pi_p),
            (AgreedNeg, yh_n, supervised * pi_n),
        ];
        if g > T::zero() {
            terms.push((LabeledPos, y_p, g * pi_p));
            terms.push((AgreedPos, yh_p, g * pi_p));
            if b.pu_negative_risk > T::zero() {
                terms.push((Disagreed, y_n, g));
                terms.push((LabeledPos, y_n, -g * pi_p));
                terms.push((AgreedPos, yh_n, -g * pi_p));
            }
        } else if g < T::zero() {
            let w = -g;
            terms.push((LabeledNeg, y_n, w * pi_n));
            terms.push((AgreedNeg, yh_n, w * pi_n));
            if b.nu_positive_risk > T::zero() {
                terms.push((Disagreed, y_p, w));
                terms.push((LabeledNeg, y_p, -w * pi_n));
                terms.push((AgreedNeg, yh_p, -w * pi_n));
            }
        }
        terms
    }
}

fn pool_rows(pools: &TrainingPools, id: PoolId) -> &[usize] {
    match id {
        PoolId::LabeledPos => &pools.labeled_pos,
        PoolId::LabeledNeg => &pools.labeled_neg,
        PoolId::AgreedPos => &pools.agreed_pos,
        PoolId::AgreedNeg => &pools.agreed_neg,
        PoolId::Disagreed => &pools.disagreed,
    }
}

pub fn pn_loss<T: Scalar>(params: &ClassifierParams<T>, features: &FeatureMatrix<T>, pools: &TrainingPools, cfg: &LossConfig<T>) -> T {
    pnu_loss(params, features, pools, cfg).pn
}

pub fn soft_pn_loss<T: Scalar>(params: &ClassifierParams<T>, features: &FeatureMatrix<T>, pools: &TrainingPools, cfg: &LossConfig<T>) -> T {
    pnu_loss(params, features, pools, cfg).soft_pn
}

/// Non-negative PU risk and whether its correction term was clamped.
pub fn nn_pu_loss<T: Scalar>(
    params: &ClassifierParams<T>,
    features: &FeatureMatrix<T>,
    pools: &TrainingPools,
    cfg: &LossConfig<T>,
) -> (T, bool) {
    let b = pnu_loss(params, features, pools, cfg);
    (b.pu, b.pu_clamped)
}

/// Non-negative NU risk and whether its correction term was clamped.
pub fn nn_nu_loss<T: Scalar>(
    params: &ClassifierParams<T>,
    features: &FeatureMatrix<T>,
    pools: &TrainingPools,
    cfg: &LossConfig<T>,
) -> (T, bool) {
    let b = pnu_loss(params, features, pools, cfg);
    (b.nu, b.nu_clamped)
}

/// All components of the PNU objective. Both PU and NU are evaluated
/// whatever the sign of γ.
pub fn pnu_loss<T: Scalar>(
    params: &ClassifierParams<T>,
    features: &FeatureMatrix<T>,
    pools: &TrainingPools,
    cfg: &LossConfig<T>,
) -> LossBreakdown<T> {
    PoolProbs::new(params, features, pools).breakdown(cfg)
}

/// Loss breakdown and gradient of its total in one pass.
pub fn pnu_loss_and_gradient<T: Scalar>(
    params: &ClassifierParams<T>,
    features: &FeatureMatrix<T>,
    pools: &TrainingPools,
    cfg: &LossConfig<T>,
) -> (LossBreakdown<T>, Gradient<T>) {
    let probs = PoolProbs::new(params, features, pools);
    let breakdown = probs.breakdown(cfg);
    let mut grad = Gradient {
        weights: vec![T::zero(); params.weights.len()],
        bias: T::zero(),
    };
    for (id, target, coef) in probs.total_terms(cfg, &breakdown) {
        let rows = pool_rows(pools, id);
        if rows.is_empty() || coef == T::zero() {
            continue;
        }
        let scale = coef / T::from_usize(rows.len()).unwrap();
        for (&row, &(p, clamped)) in rows.iter().zip(probs.get(id)) {
            if clamped {
                continue;
            }
            // d/dz of cross-entropy through the logistic link
            let dz = scale * (p - target);
            features.row(row).add_scaled_to(dz, &mut grad.weights);
            grad.bias = grad.bias + dz;
        }
    }
    (breakdown, grad)
}

/// Gradient of the PNU total with respect to weights and bias. Clamped
/// probabilities and clamped max(0, ·) branches contribute zero.
pub fn pnu_gradient<T: Scalar>(
    params: &ClassifierParams<T>,
    features: &FeatureMatrix<T>,
    pools: &TrainingPools,
    cfg: &LossConfig<T>,
) -> Gradient<T> {
    pnu_loss_and_gradient(params, features, pools, cfg).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params(w: Vec<f64>, b: f64) -> ClassifierParams<f64> {
        ClassifierParams::from_parts(w, b)
    }

    #[test]
    fn point_loss_values() {
        assert_relative_eq!(point_loss(0.5, 1.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_relative_eq!(point_loss(0.67, 0.67), 0.634_178_6, epsilon = 1e-6);
        for p in [0.01, 0.3, 0.5, 0.77, 0.999] {
            assert_relative_eq!(point_loss(p, 0.0), point_loss(1.0 - p, 1.0), epsilon = 1e-14);
        }
    }

    #[test]
    fn empty_and_single_pool_means() {
        let x = FeatureMatrix::from_dense(vec![vec![1.0, -2.0]]);
        let p = params(vec![0.3, 0.1], -0.2);
        assert_eq!(mean_pool_loss(&p, &x, &[], 1.0), 0.0);
        let prob = logistic(0.3 - 0.2 - 0.2);
        assert_relative_eq!(mean_pool_loss(&p, &x, &[0], 1.0), point_loss(prob, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn pn_symmetric_point_is_ln2() {
        let x = FeatureMatrix::from_dense(vec![vec![1.0], vec![-1.0]]);
        let p = params(vec![0.0], 0.0);
        let pools = TrainingPools {
            labeled_pos: vec![0],
            labeled_neg: vec![1],
            ..Default::default()
        };
        let cfg = LossConfig::default();
        assert_relative_eq!(pn_loss(&p, &x, &pools, &cfg), std::f64::consts::LN_2, epsilon = 1e-15);
        let only_pos = TrainingPools {
            labeled_pos: vec![0],
            ..Default::default()
        };
        assert_relative_eq!(pn_loss(&p, &x, &only_pos, &cfg), 0.5 * std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn soft_pn_single_agreed_positive() {
        // logit chosen so p = 0.67 exactly
        let z = (0.67f64 / 0.33).ln();
        let x = FeatureMatrix::from_dense(vec![vec![1.0]]);
        let p = params(vec![z], 0.0);
        let pools = TrainingPools {
            agreed_pos: vec![0],
            ..Default::default()
        };
        let cfg = LossConfig::default();
        assert_relative_eq!(soft_pn_loss(&p, &x, &pools, &cfg), 0.5 * 0.634_178_6, epsilon = 1e-6);
        assert_eq!(soft_pn_loss(&p, &x, &TrainingPools::default(), &cfg), 0.0);
    }

    #[test]
    fn empty_pools_give_zero_pu_nu() {
        let x = FeatureMatrix::from_dense(vec![vec![1.0]]);
        let p = params(vec![0.4], 0.0);
        let pools = TrainingPools {
            labeled_neg: vec![0],
            ..Default::default()
        };
        let cfg = LossConfig::default();
        assert_eq!(nn_pu_loss(&p, &x, &pools, &cfg).0, 0.0);
        assert_eq!(nn_nu_loss(&p, &x, &TrainingPools::default(), &cfg).0, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(1.5, 0.5, 0.67, 0.33).is_err());
        assert!(LossConfig::new(0.1, 1.0, 0.67, 0.33).is_err());
        assert!(LossConfig::new(0.1, 0.5, 0.33, 0.67).is_err());
        assert!(LossConfig::new(-1.0, 0.5, 0.67, 0.33).is_ok());
        let d = LossConfig::<f64>::default();
        assert_eq!((d.gamma, d.pi_p, d.y_hat_p, d.y_hat_n), (0.1, 0.5, 0.67, 0.33));
        assert_eq!(d.pi_n() + d.pi_p, 1.0);
    }
}
