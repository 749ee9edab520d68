#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selftrain::classifier::ClassifierParams;
use selftrain::features::FeatureMatrix;
use selftrain::loss::{LossConfig, TrainingPools};

/// A self-contained loss instance: dense rows, a pool assignment and params.
#[derive(Debug, Clone)]
pub struct Instance {
    pub rows: Vec<Vec<f64>>,
    pub pools: TrainingPools,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub cfg: LossConfig<f64>,
}

impl Instance {
    pub fn features(&self) -> FeatureMatrix<f64> {
        FeatureMatrix::from_dense(self.rows.clone())
    }

    pub fn params(&self) -> ClassifierParams<f64> {
        ClassifierParams::from_parts(self.weights.clone(), self.bias)
    }

    pub fn n_samples(&self) -> usize {
        self.rows.len()
    }
}

/// Random instance with at most `max_samples` samples spread over the five
/// pools (any pool may be empty) and moderate logits.
pub fn random_instance(rng: &mut ChaCha8Rng, max_samples: usize, gamma: f64) -> Instance {
    let dim = rng.gen_range(1..=5);
    let n = rng.gen_range(1..=max_samples);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let mut pools = TrainingPools::default();
    for i in 0..n {
        match rng.gen_range(0..5) {
            0 => pools.labeled_pos.push(i),
            1 => pools.labeled_neg.push(i),
            2 => pools.agreed_pos.push(i),
            3 => pools.agreed_neg.push(i),
            _ => pools.disagreed.push(i),
        }
    }
    let pi_p = rng.gen_range(0.2..0.8);
    let y_hat_n = rng.gen_range(0.05..0.45);
    let y_hat_p = rng.gen_range(0.55..0.95);
    Instance {
        rows,
        pools,
        weights: (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        bias: rng.gen_range(-1.0..1.0),
        cfg: LossConfig::new(gamma, pi_p, y_hat_p, y_hat_n).unwrap(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent evaluation of every loss component by direct summation.
#[derive(Debug, Clone, Copy)]
pub struct OracleLoss {
    pub total: f64,
    pub pn: f64,
    pub soft_pn: f64,
    pub pu: f64,
    pub nu: f64,
    pub pu_arg: f64,
    pub nu_arg: f64,
}

const EPS: f64 = 1e-7;

fn prob(weights: &[f64], bias: f64, x: &[f64]) -> f64 {
    let mut z = bias;
    for j in 0..x.len() {
        z += weights[j] * x[j];
    }
    let p = 1.0 / (1.0 + (-z).exp());
    p.clamp(EPS, 1.0 - EPS)
}

fn ce(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn avg(rows: &[Vec<f64>], idx: &[usize], weights: &[f64], bias: f64, y: f64) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for &i in idx {
        s += ce(prob(weights, bias, &rows[i]), y);
    }
    s / idx.len() as f64
}

pub fn oracle_with(inst: &Instance, weights: &[f64], bias: f64) -> OracleLoss {
    let c = &inst.cfg;
    let pp = &inst.pools;
    let r = &inst.rows;
    let pi_p = c.pi_p;
    let pi_n = 1.0 - pi_p;
    let l = |idx: &[usize], y: f64| avg(r, idx, weights, bias, y);

    let pn = pi_p * l(&pp.labeled_pos, 1.0) + pi_n * l(&pp.labeled_neg, 0.0);
    let soft_pn = pi_p * l(&pp.agreed_pos, c.y_hat_p) + pi_n * l(&pp.agreed_neg, c.y_hat_n);
    let pu_arg = l(&pp.disagreed, 0.0) - pi_p * (l(&pp.labeled_pos, 0.0) + l(&pp.agreed_pos, c.y_hat_n));
    let pu = pi_p * (l(&pp.labeled_pos, 1.0) + l(&pp.agreed_pos, c.y_hat_p)) + pu_arg.max(0.0);
    let nu_arg = l(&pp.disagreed, 1.0) - pi_n * (l(&pp.labeled_neg, 1.0) + l(&pp.agreed_neg, c.y_hat_p));
    let nu = pi_n * (l(&pp.labeled_neg, 0.0) + l(&pp.agreed_neg, c.y_hat_n)) + nu_arg.max(0.0);
    let g = c.gamma;
    let total = if g >= 0.0 {
        (1.0 - g) * (pn + soft_pn) + g * pu
    } else {
        (1.0 + g) * (pn + soft_pn) - g * nu
    };
    OracleLoss {
        total,
        pn,
        soft_pn,
        pu,
        nu,
        pu_arg,
        nu_arg,
    }
}

pub fn oracle(inst: &Instance) -> OracleLoss {
    oracle_with(inst, &inst.weights, inst.bias)
}

/// Central finite differences of the oracle total; bias last.
pub fn finite_difference(inst: &Instance, step: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(inst.weights.len() + 1);
    for j in 0..inst.weights.len() {
        let mut up = inst.weights.clone();
        let mut down = inst.weights.clone();
        up[j] += step;
        down[j] -= step;
        let d = oracle_with(inst, &up, inst.bias).total - oracle_with(inst, &down, inst.bias).total;
        out.push(d / (2.0 * step));
    }
    let d = oracle_with(inst, &inst.weights, inst.bias + step).total - oracle_with(inst, &inst.weights, inst.bias - step).total;
    out.push(d / (2.0 * step));
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the plain distance when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Instance whose PU correction is clamped: disagreed samples sit far on the
/// negative side, positives far on the positive side.
pub fn pu_clamp_instance(gamma: f64) -> Instance {
    let rows = vec![
        vec![2.0, 0.5],
        vec![1.5, -0.3],
        vec![1.8, 0.1],
        vec![-2.0, 0.2],
        vec![-1.7, -0.4],
        vec![-2.2, 0.0],
    ];
    Instance {
        rows,
        pools: TrainingPools {
            labeled_pos: vec![0],
            labeled_neg: vec![],
            agreed_pos: vec![1, 2],
            agreed_neg: vec![],
            disagreed: vec![3, 4, 5],
        },
        weights: vec![2.5, 0.3],
        bias: 0.0,
        cfg: LossConfig::new(gamma, 0.5, 0.67, 0.33).unwrap(),
    }
}

/// The label mirror of an instance: positive and negative pools swap,
/// features and params are negated, priors and soft targets are mirrored.
pub fn mirror(inst: &Instance) -> Instance {
    let c = &inst.cfg;
    Instance {
        rows: inst.rows.clone(),
        pools: TrainingPools {
            labeled_pos: inst.pools.labeled_neg.clone(),
            labeled_neg: inst.pools.labeled_pos.clone(),
            agreed_pos: inst.pools.agreed_neg.clone(),
            agreed_neg: inst.pools.agreed_pos.clone(),
            disagreed: inst.pools.disagreed.clone(),
        },
        weights: inst.weights.iter().map(|w| -w).collect(),
        bias: -inst.bias,
        cfg: LossConfig::new(-c.gamma, 1.0 - c.pi_p, 1.0 - c.y_hat_n, 1.0 - c.y_hat_p).unwrap(),
    }
}

/// Analytic gradient of `Σ coef · mean_pool CE(p, target)` by direct
/// summation, ignoring the probability clamp (callers keep logits moderate).
pub fn oracle_pool_gradient(inst: &Instance, terms: &[(&[usize], f64, f64)]) -> Vec<f64> {
    let dim = inst.weights.len();
    let mut g = vec![0.0; dim + 1];
    for &(idx, target, coef) in terms {
        if idx.is_empty() {
            continue;
        }
        for &i in idx {
            let p = prob(&inst.weights, inst.bias, &inst.rows[i]);
            let dz = coef * (p - target) / idx.len() as f64;
            for j in 0..dim {
                g[j] += dz * inst.rows[i][j];
            }
            g[dim] += dz;
        }
    }
    g
}

// ---- pipeline experiments ----

use std::collections::HashMap;
use std::sync::Arc;

use selftrain::adjudicator::{Adjudicator, MockAgent, PromptTemplates, RetryPolicy};
use selftrain::pipeline::{run_self_training, run_supervised_only, SelfTrainingResult, SupervisedResult};
use selftrain::synth::{generate, SynthConfig};
use selftrain::{Dataset, Label, RunConfig};

pub fn synth_dataset(size: usize, seed: u64) -> Dataset {
    let cfg = SynthConfig {
        size,
        seed,
        ..Default::default()
    };
    Dataset::from_samples(generate(&cfg).unwrap(), None).unwrap()
}

/// The experiment settings: n = 100, k = 500, γ = 0.1 and a learning rate
/// suited to the synthetic embeddings.
pub fn experiment_config(seed: u64) -> RunConfig {
    RunConfig {
        seed: Some(seed),
        learning_rate: 3.0,
        ..Default::default()
    }
}

pub fn train_golds(ds: &Dataset) -> Arc<HashMap<String, Label>> {
    Arc::new(selftrain::pipeline::train_golds(ds))
}

pub fn mock_adjudicator(agent: MockAgent) -> Adjudicator {
    Adjudicator::with_transport(Arc::new(agent), PromptTemplates::default(), RetryPolicy::no_delay(0))
}

pub fn oracle_adjudicator(ds: &Dataset, flip: f64, seed: u64) -> Adjudicator {
    mock_adjudicator(MockAgent::oracle(train_golds(ds), flip, seed))
}

pub fn self_train(ds: &Dataset, cfg: &RunConfig, adj: &Adjudicator) -> SelfTrainingResult<f64> {
    run_self_training::<f64>(ds, cfg, adj, None, false, &mut |_| {}).unwrap()
}

pub fn supervised(ds: &Dataset, cfg: &RunConfig) -> SupervisedResult<f64> {
    run_supervised_only::<f64>(ds, cfg).unwrap()
}
