//! Scripted agents for desk-scale runs and tests.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decision::Decision;
use super::transport::{CallContext, ChatRequest, Phase, Transport, TransportError};
use crate::data::Label;
use crate::features::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedDecision {
    Positive,
    Negative,
    /// Answer without a DECISION line.
    Unparseable,
}

impl From<Label> for ScriptedDecision {
    fn from(l: Label) -> Self {
        match l {
            Label::Positive => ScriptedDecision::Positive,
            Label::Negative => ScriptedDecision::Negative,
        }
    }
}

/// Per-sample script entry: one decision for both phases, or one per phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptEntry {
    Both(ScriptedDecision),
    Phased {
        initial: ScriptedDecision,
        #[serde(rename = "final")]
        final_: ScriptedDecision,
    },
}

impl ScriptEntry {
    fn for_phase(self, phase: Phase) -> ScriptedDecision {
        match (self, phase) {
            (ScriptEntry::Both(d), _) => d,
            (ScriptEntry::Phased { initial, .. }, Phase::Initial) => initial,
            (ScriptEntry::Phased { final_, .. }, Phase::Review) => final_,
        }
    }
}

#[derive(Debug, Clone)]
pub enum MockMode {
    /// Answers the gold label, flipped with probability `flip_probability`.
    /// The flip is a fixed function of (seed, agent, sample), so an agent
    /// holds the same view in both phases and across runs.
    Oracle {
        golds: Arc<HashMap<String, Label>>,
        flip_probability: f64,
    },
    /// Answers from a per-sample script.
    Fixed { script: Arc<BTreeMap<String, ScriptEntry>> },
    /// Always contradicts the classifier's pseudo-label.
    Adversarial,
}

#[derive(Debug, Clone)]
pub struct MockAgent {
    mode: MockMode,
    seed: u64,
    failing: Arc<HashSet<String>>,
}

impl MockAgent {
    pub fn new(mode: MockMode, seed: u64) -> Self {
        MockAgent {
            mode,
            seed,
            failing: Arc::default(),
        }
    }

    pub fn oracle(golds: Arc<HashMap<String, Label>>, flip_probability: f64, seed: u64) -> Self {
        Self::new(
            MockMode::Oracle {
                golds,
                flip_probability,
            },
            seed,
        )
    }

    pub fn fixed(script: BTreeMap<String, ScriptEntry>) -> Self {
        Self::new(MockMode::Fixed { script: Arc::new(script) }, 0)
    }

    pub fn adversarial() -> Self {
        Self::new(MockMode::Adversarial, 0)
    }

    /// Every call about these samples fails transiently.
    pub fn with_failing(mut self, ids: impl IntoIterator<Item = String>) -> Self {
        self.failing = Arc::new(ids.into_iter().collect());
        self
    }

    fn flipped(&self, ctx: &CallContext, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        let key = format!("{}|{}|{}", self.seed, ctx.agent.name(), ctx.sample_id);
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(key.as_bytes()));
        rng.gen::<f64>() < p
    }

    pub fn decide(&self, ctx: &CallContext) -> Result<ScriptedDecision, TransportError> {
        if self.failing.contains(&ctx.sample_id) {
            return Err(TransportError::Transient(format!("injected failure for `{}`", ctx.sample_id)));
        }
        match &self.mode {
            MockMode::Oracle {
                golds,
                flip_probability,
            } => {
                let gold = golds
                    .get(&ctx.sample_id)
                    .ok_or_else(|| TransportError::Fatal(format!("oracle agent has no gold label for `{}`", ctx.sample_id)))?;
                let label = if self.flipped(ctx, *flip_probability) {
                    gold.flip()
                } else {
                    *gold
                };
                Ok(label.into())
            }
            MockMode::Fixed { script } => script
                .get(&ctx.sample_id)
                .map(|e| e.for_phase(ctx.phase))
                .ok_or_else(|| TransportError::Fatal(format!("sample `{}` missing from mock script", ctx.sample_id))),
            MockMode::Adversarial => {
                let label = ctx.classifier_label.ok_or_else(|| {
                    TransportError::Fatal("adversarial agent needs the classifier label, which this call does not carry".into())
                })?;
                Ok(label.flip().into())
            }
        }
    }

    pub fn respond(&self, ctx: &CallContext) -> Result<String, TransportError> {
        let decision = self.decide(ctx)?;
        Ok(render_response(ctx, decision))
    }
}

/// Deterministic response text in the strict answer format.
pub fn render_response(ctx: &CallContext, decision: ScriptedDecision) -> String {
    let verdict = match decision {
        ScriptedDecision::Positive => Decision::Positive,
        ScriptedDecision::Negative => Decision::Negative,
        ScriptedDecision::Unparseable => {
            return format!("I would rather not commit to a label for item {}.", ctx.sample_id);
        }
    };
    let lead = match ctx.phase {
        Phase::Initial => format!("As the {}, my reading of item {}", ctx.agent, ctx.sample_id),
        Phase::Review => format!("Having read the other assessment, as the {} my reading of item {}", ctx.agent, ctx.sample_id),
    };
    let why = if verdict == Decision::Positive {
        "is that it is offensive"
    } else {
        "is that it is not offensive"
    };
    format!("RATIONALE: {lead} {why}.\nDECISION: {}", verdict.keyword())
}

impl Transport for MockAgent {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        self.respond(&request.context)
    }
}
