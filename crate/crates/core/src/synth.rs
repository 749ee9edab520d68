//! Synthetic two-class datasets with controllable difficulty.
//!
//! With `y = ±1` and separability `s`, embeddings are
//!
//! ```text
//! x0 = 0.04·s·y + 0.05·z0     sharp: small scale, signal-to-noise 0.8·s
//! x1 = 0.25·s·y + z1          broad: unit scale, signal-to-noise 0.25·s
//! xj = zj                     j ≥ 2, pure noise
//! ```
//!
//! so the Bayes accuracy is `Φ(0.838·s)`. The sharp coordinate carries most
//! of the signal but its small scale means a few epochs of gradient descent
//! barely pick it up, and the noise coordinates make a small labeled set
//! overfit. Text is a bag of tokens where each token is a class cue with
//! probability `s / (s + 2)` and filler otherwise. Gold labels are flipped
//! for an exact `noise` fraction of samples after generation. Splits are
//! 80/10/10.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Label, Sample, Split};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("size must be at least 10, got {0}")]
    TooSmall(usize),
    #[error("class balance must lie strictly between 0 and 1, got {0}")]
    Balance(f64),
    #[error("separability must be non-negative and finite, got {0}")]
    Separability(f64),
    #[error("label noise must lie in [0, 0.5), got {0}")]
    Noise(f64),
    #[error("text needs at least one token per sample and one cue word")]
    EmptyText,
    #[error("at least one of text or embeddings must be generated")]
    NoFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    /// Fraction of positive samples.
    pub balance: f64,
    pub separability: f64,
    /// Fraction of gold labels flipped.
    pub noise: f64,
    pub seed: u64,
    /// Embedding dimension; 0 writes no embeddings.
    pub dim: usize,
    pub text: bool,
    pub tokens_per_sample: usize,
    /// Distinct cue tokens per class.
    pub cue_words: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 10_000,
            balance: 0.5,
            separability: 2.0,
            noise: 0.05,
            seed: 0,
            dim: 32,
            text: true,
            tokens_per_sample: 16,
            cue_words: 400,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.size < 10 {
            return Err(SynthError::TooSmall(self.size));
        }
        if !(self.balance > 0.0 && self.balance < 1.0) {
            return Err(SynthError::Balance(self.balance));
        }
        if !(self.separability.is_finite() && self.separability >= 0.0) {
            return Err(SynthError::Separability(self.separability));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(SynthError::Noise(self.noise));
        }
        if self.text && (self.cue_words == 0 || self.tokens_per_sample == 0) {
            return Err(SynthError::EmptyText);
        }
        if self.dim == 0 && !self.text {
            return Err(SynthError::NoFeatures);
        }
        Ok(())
    }
}

const FILLER_WORDS: usize = 2000;
const SHARP_SHIFT: f64 = 0.04;
const SHARP_SCALE: f64 = 0.05;
const BROAD_SHIFT: f64 = 0.25;

fn token(rng: &mut ChaCha8Rng, label: Label, cue_rate: f64, cue_words: usize) -> String {
    if rng.gen::<f64>() < cue_rate {
        let prefix = if label.is_positive() { "hot" } else { "calm" };
        format!("{prefix}{}", rng.gen_range(0..cue_words))
    } else {
        format!("word{}", rng.gen_range(0..FILLER_WORDS))
    }
}

/// Generates the samples in id order. Deterministic in `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<Vec<Sample>, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.size;

    let n_pos = ((n as f64) * config.balance).round() as usize;
    let mut labels: Vec<Label> = (0..n).map(|i| Label::from_bool(i < n_pos)).collect();
    labels.shuffle(&mut rng);

    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let split_of = |i: usize| {
        if i < n_train {
            Split::Train
        } else if i < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        }
    };

    let cue_rate = config.separability / (config.separability + 2.0);
    let width = n.to_string().len().max(5);
    let mut samples: Vec<Sample> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let sign = if label.is_positive() { 1.0 } else { -1.0 };
            let embedding = (config.dim > 0).then(|| {
                let mut x: Vec<f64> = (0..config.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                x[0] = SHARP_SHIFT * config.separability * sign + SHARP_SCALE * x[0];
                if config.dim > 1 {
                    x[1] += BROAD_SHIFT * config.separability * sign;
                }
                x
            });
            let text = if config.text {
                (0..config.tokens_per_sample)
                    .map(|_| token(&mut rng, label, cue_rate, config.cue_words))
                    .collect::<Vec<_>>()
                    .join(" ")
            } else {
                String::new()
            };
            Sample {
                id: format!("s{i:0width$}"),
                text,
                gold_label: Some(label),
                split: split_of(i),
                embedding,
                image_ref: None,
            }
        })
        .collect();

    let n_noisy = ((n as f64) * config.noise).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &i in &order[..n_noisy] {
        let s = &mut samples[i];
        s.gold_label = s.gold_label.map(Label::flip);
    }
    Ok(samples)
}
