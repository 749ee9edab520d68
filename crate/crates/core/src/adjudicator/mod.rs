//! Two-persona verification of classifier pseudo-labels.
//!
//! Each candidate goes through two phases. In the first, the moderator and
//! the user judge the item independently. In the second, each sees the
//! other's decision and rationale and gives a final decision. An item is
//! agreed only when both final decisions equal the classifier's label;
//! everything else, unparseable answers and exhausted retries included, is
//! disagreed.

pub mod decision;
pub mod mock;
pub mod prompt;
pub mod server;
pub mod transport;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use decision::{extract_rationale, parse_decision, Decision};
pub use mock::{MockAgent, MockMode, ScriptEntry, ScriptedDecision};
pub use prompt::{AgentPersona, AgentRole, InitialJudgment, PromptTemplates, Stance, TemplateError};
pub use transport::{CallContext, ChatMessage, ChatRequest, HttpTransport, Phase, Role, Transport, TransportError};

use crate::data::{Label, Sample};

#[derive(Debug, thiserror::Error)]
pub enum AdjudicationError {
    #[error("prompt template: {0}")]
    Template(#[from] TemplateError),
    #[error("agent {agent} on sample `{sample_id}`: {message}")]
    Fatal {
        agent: AgentRole,
        sample_id: String,
        message: String,
    },
    #[error("parallelism must be at least 1")]
    ZeroParallelism,
    #[error("adjudicator personas must be one moderator and one user with different prompts")]
    Personas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    AgreedPositive,
    AgreedNegative,
    Disagreed,
}

/// Agreed only when the classifier and both final decisions coincide.
pub fn unanimity(classifier: Label, moderator_final: Decision, user_final: Decision) -> Outcome {
    let c = Decision::from(classifier);
    if moderator_final == c && user_final == c {
        match classifier {
            Label::Positive => Outcome::AgreedPositive,
            Label::Negative => Outcome::AgreedNegative,
        }
    } else {
        Outcome::Disagreed
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub agent: AgentRole,
    pub initial_decision: Decision,
    pub initial_rationale: String,
    pub final_decision: Decision,
    pub final_rationale: String,
}

impl AgentRecord {
    fn pending(agent: AgentRole) -> Self {
        AgentRecord {
            agent,
            initial_decision: Decision::Unparseable,
            initial_rationale: String::new(),
            final_decision: Decision::Unparseable,
            final_rationale: String::new(),
        }
    }
}

/// One request/response pair, kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub agent: AgentRole,
    pub phase: Phase,
    pub messages: Vec<ChatMessage>,
    pub response: Option<String>,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub sample_id: String,
    pub classifier_label: Label,
    pub moderator: AgentRecord,
    pub user: AgentRecord,
    pub outcome: Outcome,
    pub exchanges: Vec<Exchange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before retry number `attempt` (1-based): base * 2^(attempt-1), capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

pub struct Agent {
    pub persona: AgentPersona,
    pub transport: Arc<dyn Transport>,
}

impl Agent {
    pub fn new(persona: AgentPersona, transport: Arc<dyn Transport>) -> Self {
        Agent { persona, transport }
    }
}

pub struct Adjudicator {
    pub moderator: Agent,
    pub user: Agent,
    pub templates: PromptTemplates,
    pub retry: RetryPolicy,
}

/// A candidate and the classifier's hard pseudo-label for it.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub sample: &'a Sample,
    pub label: Label,
}

enum CallResult {
    Answer(String),
    Exhausted(String),
}

impl Adjudicator {
    pub fn new(moderator: Agent, user: Agent, templates: PromptTemplates, retry: RetryPolicy) -> Result<Self, AdjudicationError> {
        if moderator.persona.role != AgentRole::Moderator
            || user.persona.role != AgentRole::User
            || moderator.persona.system_prompt == user.persona.system_prompt
        {
            return Err(AdjudicationError::Personas);
        }
        Ok(Adjudicator {
            moderator,
            user,
            templates,
            retry,
        })
    }

    /// Both agents backed by the same transport, default personas.
    pub fn with_transport(transport: Arc<dyn Transport>, templates: PromptTemplates, retry: RetryPolicy) -> Self {
        Adjudicator {
            moderator: Agent::new(AgentPersona::moderator(), Arc::clone(&transport)),
            user: Agent::new(AgentPersona::user(), transport),
            templates,
            retry,
        }
    }

    fn agent(&self, role: AgentRole) -> &Agent {
        match role {
            AgentRole::Moderator => &self.moderator,
            AgentRole::User => &self.user,
        }
    }

    fn call(
        &self,
        role: AgentRole,
        phase: Phase,
        candidate: Candidate<'_>,
        messages: Vec<ChatMessage>,
        exchanges: &mut Vec<Exchange>,
    ) -> Result<CallResult, AdjudicationError> {
        let request = ChatRequest {
            messages,
            context: CallContext {
                sample_id: candidate.sample.id.clone(),
                agent: role,
                phase,
                classifier_label: Some(candidate.label),
            },
        };
        let transport = &self.agent(role).transport;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match transport.complete(&request) {
                Ok(text) => {
                    exchanges.push(Exchange {
                        agent: role,
                        phase,
                        messages: request.messages,
                        response: Some(text.clone()),
                        attempts,
                        error: None,
                    });
                    return Ok(CallResult::Answer(text));
                }
                Err(TransportError::Fatal(message)) => {
                    return Err(AdjudicationError::Fatal {
                        agent: role,
                        sample_id: candidate.sample.id.clone(),
                        message,
                    })
                }
                Err(TransportError::Transient(message)) => {
                    if attempts > self.retry.max_retries {
                        exchanges.push(Exchange {
                            agent: role,
                            phase,
                            messages: request.messages,
                            response: None,
                            attempts,
                            error: Some(message.clone()),
                        });
                        return Ok(CallResult::Exhausted(message));
                    }
                    tracing::debug!(agent = %role, sample = %candidate.sample.id, attempts, %message, "retrying");
                    std::thread::sleep(self.retry.delay(attempts));
                }
            }
        }
    }

    /// Runs the decide / review / decide protocol for one candidate.
    pub fn negotiate(&self, candidate: Candidate<'_>) -> Result<Transcript, AdjudicationError> {
        let mut exchanges = Vec::with_capacity(4);
        let mut records = [AgentRecord::pending(AgentRole::Moderator), AgentRecord::pending(AgentRole::User)];
        let roles = [AgentRole::Moderator, AgentRole::User];
        let exhausted = |records: [AgentRecord; 2], exchanges, note: String| Transcript {
            sample_id: candidate.sample.id.clone(),
            classifier_label: candidate.label,
            moderator: records[0].clone(),
            user: records[1].clone(),
            outcome: Outcome::Disagreed,
            exchanges,
            failure: Some(note),
        };

        let mut initial: Vec<InitialJudgment> = Vec::with_capacity(2);
        for (i, role) in roles.into_iter().enumerate() {
            let messages = prompt::build_initial_prompt(&self.agent(role).persona, candidate.sample, candidate.label, &self.templates)?;
            match self.call(role, Phase::Initial, candidate, messages, &mut exchanges)? {
                CallResult::Answer(raw) => {
                    let judgment = InitialJudgment {
                        decision: parse_decision(&raw),
                        rationale: extract_rationale(&raw),
                        raw,
                    };
                    records[i].initial_decision = judgment.decision;
                    records[i].initial_rationale = judgment.rationale.clone();
                    initial.push(judgment);
                }
                CallResult::Exhausted(msg) => {
                    return Ok(exhausted(records, exchanges, format!("{role} initial call failed: {msg}")));
                }
            }
        }

        for (i, role) in roles.into_iter().enumerate() {
            let messages = prompt::build_review_prompt(
                &self.agent(role).persona,
                candidate.sample,
                candidate.label,
                &self.templates,
                &initial[i],
                &initial[1 - i],
            )?;
            match self.call(role, Phase::Review, candidate, messages, &mut exchanges)? {
                CallResult::Answer(raw) => {
                    records[i].final_decision = parse_decision(&raw);
                    records[i].final_rationale = extract_rationale(&raw);
                }
                CallResult::Exhausted(msg) => {
                    return Ok(exhausted(records, exchanges, format!("{role} review call failed: {msg}")));
                }
            }
        }

        let [moderator, user] = records;
        Ok(Transcript {
            sample_id: candidate.sample.id.clone(),
            classifier_label: candidate.label,
            outcome: unanimity(candidate.label, moderator.final_decision, user.final_decision),
            moderator,
            user,
            exchanges,
            failure: None,
        })
    }

    /// Negotiates every candidate with at most `parallelism` in flight.
    /// Transcripts come back sorted by sample id. A fatal error on any
    /// sample aborts the batch.
    pub fn adjudicate_batch(&self, candidates: &[Candidate<'_>], parallelism: usize) -> Result<Vec<Transcript>, AdjudicationError> {
        if parallelism == 0 {
            return Err(AdjudicationError::ZeroParallelism);
        }
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let slots: Mutex<Vec<Option<Result<Transcript, AdjudicationError>>>> =
            Mutex::new((0..candidates.len()).map(|_| None).collect());

        std::thread::scope(|scope| {
            for _ in 0..parallelism.min(candidates.len().max(1)) {
                scope.spawn(|| loop {
                    if abort.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(candidate) = candidates.get(i) else { break };
                    let result = self.negotiate(*candidate);
                    if result.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    slots.lock().expect("slot lock")[i] = Some(result);
                });
            }
        });

        let mut transcripts = Vec::with_capacity(candidates.len());
        let mut first_error: Option<(usize, AdjudicationError)> = None;
        for (i, slot) in slots.into_inner().expect("slot lock").into_iter().enumerate() {
            match slot {
                Some(Ok(t)) => transcripts.push(t),
                Some(Err(e)) if first_error.is_none() => first_error = Some((i, e)),
                _ => {}
            }
        }
        if let Some((_, e)) = first_error {
            return Err(e);
        }
        transcripts.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        Ok(transcripts)
    }
}
