//! Persona prompts and the two negotiation message templates.

use serde::{Deserialize, Serialize};

use super::decision::Decision;
use super::transport::{ChatMessage, Role};
use crate::data::{Label, Sample};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template references unknown variable `{{{0}}}`")]
    MissingVariable(String),
    #[error("unbalanced brace in template at byte {0}")]
    Unbalanced(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Moderator,
    User,
}

impl AgentRole {
    pub fn name(self) -> &'static str {
        match self {
            AgentRole::Moderator => "moderator",
            AgentRole::User => "user",
        }
    }

    pub fn peer(self) -> Self {
        match self {
            AgentRole::Moderator => AgentRole::User,
            AgentRole::User => AgentRole::Moderator,
        }
    }
}

impl std::fmt::Display for AgentRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stance {
    SafetyFirst,
    FreeExpression,
}

pub const MODERATOR_SYSTEM_PROMPT: &str = "You are a strict content moderator for a large social media platform. \
Your first priority is the safety of the community. You enforce the platform's policy against offensive content \
firmly, you look for implicit and coded harm as well as explicit abuse, and when content is borderline you lean \
toward flagging it.";

pub const USER_SYSTEM_PROMPT: &str = "You are an ordinary member of a large social media platform who values free \
expression. You dislike over-moderation: you consider content offensive only when the harm is clear, and you give \
authors the benefit of the doubt on jokes, irony and borderline cases.";

pub const DEFAULT_TASK: &str = "Decide whether the following social media content is offensive (hateful, abusive or \
demeaning toward a person or group). POSITIVE means offensive; NEGATIVE means not offensive.";

pub const INITIAL_TEMPLATE: &str = "{task}

Item ID: {item_id}
Content:
\"\"\"
{content}
\"\"\"
{classifier_hint}
Give your own independent judgment. Answer in exactly this format:
RATIONALE: <your reasoning in a few sentences>
DECISION: POSITIVE or DECISION: NEGATIVE
The DECISION line must be the last line of your answer.";

pub const REVIEW_TEMPLATE: &str = "Another reviewer, the {peer_name}, assessed the same item.
Their decision: {peer_decision}
Their rationale:
\"\"\"
{peer_rationale}
\"\"\"

Review their judgment against your own. You may keep or change your decision. Answer in exactly the same format:
RATIONALE: <your reasoning in a few sentences>
DECISION: POSITIVE or DECISION: NEGATIVE
The DECISION line must be the last line of your answer.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPersona {
    pub role: AgentRole,
    pub system_prompt: String,
    pub stance: Stance,
}

impl AgentPersona {
    pub fn moderator() -> Self {
        AgentPersona {
            role: AgentRole::Moderator,
            system_prompt: MODERATOR_SYSTEM_PROMPT.to_string(),
            stance: Stance::SafetyFirst,
        }
    }

    pub fn user() -> Self {
        AgentPersona {
            role: AgentRole::User,
            system_prompt: USER_SYSTEM_PROMPT.to_string(),
            stance: Stance::FreeExpression,
        }
    }
}

/// Task framing and message templates shared by both agents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    pub task: String,
    pub initial: String,
    pub review: String,
    /// Show the classifier's pseudo-label to the agents.
    pub reveal_classifier_label: bool,
    /// Attach `image_ref` to the first user message.
    pub attach_images: bool,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            task: DEFAULT_TASK.to_string(),
            initial: INITIAL_TEMPLATE.to_string(),
            review: REVIEW_TEMPLATE.to_string(),
            reveal_classifier_label: false,
            attach_images: false,
        }
    }
}

/// Substitutes `{name}` placeholders. `{{` and `}}` are literal braces.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len() + 256);
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                out.push('{');
                i += 2;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                out.push('}');
                i += 2;
            }
            b'{' => {
                let end = template[i + 1..].find('}').ok_or(TemplateError::Unbalanced(i))? + i + 1;
                let name = &template[i + 1..end];
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| TemplateError::MissingVariable(name.to_string()))?;
                out.push_str(value);
                i = end + 1;
            }
            b'}' => return Err(TemplateError::Unbalanced(i)),
            _ => {
                let next = template[i..].find(['{', '}']).map_or(bytes.len(), |n| n + i);
                out.push_str(&template[i..next]);
                i = next;
            }
        }
    }
    Ok(out)
}

fn classifier_hint(templates: &PromptTemplates, classifier_label: Label) -> String {
    if templates.reveal_classifier_label {
        format!(
            "An automated classifier labeled this item {}.\n",
            Decision::from(classifier_label).keyword()
        )
    } else {
        String::new()
    }
}

/// System persona plus the first-phase request.
pub fn build_initial_prompt(
    persona: &AgentPersona,
    sample: &Sample,
    classifier_label: Label,
    templates: &PromptTemplates,
) -> Result<Vec<ChatMessage>, TemplateError> {
    let hint = classifier_hint(templates, classifier_label);
    let body = render(
        &templates.initial,
        &[
            ("task", &templates.task),
            ("item_id", &sample.id),
            ("content", &sample.text),
            ("classifier_hint", &hint),
            ("persona", persona.role.name()),
        ],
    )?;
    let mut user = ChatMessage::new(Role::User, body);
    if templates.attach_images {
        user.image_ref = sample.image_ref.clone();
    }
    Ok(vec![ChatMessage::new(Role::System, persona.system_prompt.clone()), user])
}

/// An agent's first-phase answer, as forwarded to its peer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialJudgment {
    pub decision: Decision,
    pub rationale: String,
    pub raw: String,
}

/// Continues the agent's own first-phase conversation with the peer's
/// judgment and asks for a final decision.
pub fn build_review_prompt(
    persona: &AgentPersona,
    sample: &Sample,
    classifier_label: Label,
    templates: &PromptTemplates,
    own_initial: &InitialJudgment,
    peer_initial: &InitialJudgment,
) -> Result<Vec<ChatMessage>, TemplateError> {
    let mut messages = build_initial_prompt(persona, sample, classifier_label, templates)?;
    messages.push(ChatMessage::new(Role::Assistant, own_initial.raw.clone()));
    let (peer_decision, peer_rationale) = match peer_initial.decision {
        Decision::Unparseable => (
            "UNPARSEABLE (their answer had no DECISION line; it is quoted in full below)".to_string(),
            peer_initial.raw.as_str(),
        ),
        d => (d.keyword().to_string(), peer_initial.rationale.as_str()),
    };
    let body = render(
        &templates.review,
        &[
            ("peer_name", persona.role.peer().name()),
            ("peer_decision", &peer_decision),
            ("peer_rationale", peer_rationale),
            ("item_id", &sample.id),
            ("task", &templates.task),
            ("persona", persona.role.name()),
        ],
    )?;
    messages.push(ChatMessage::new(Role::User, body));
    Ok(messages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn sample() -> Sample {
        Sample {
            id: "fhm-0042".into(),
            text: "look at this meme".into(),
            gold_label: None,
            split: Split::Train,
            embedding: None,
            image_ref: Some("img/42.png".into()),
        }
    }

    #[test]
    fn render_substitutes_and_escapes() {
        assert_eq!(render("a {x} {{y}}", &[("x", "1")]).unwrap(), "a 1 {y}");
        assert_eq!(
            render("{missing}", &[]),
            Err(TemplateError::MissingVariable("missing".into()))
        );
        assert_eq!(render("oops {", &[]), Err(TemplateError::Unbalanced(5)));
    }

    #[test]
    fn initial_prompt_is_deterministic() {
        let t = PromptTemplates::default();
        let a = build_initial_prompt(&AgentPersona::moderator(), &sample(), Label::Positive, &t).unwrap();
        let b = build_initial_prompt(&AgentPersona::moderator(), &sample(), Label::Positive, &t).unwrap();
        assert_eq!(a, b);
        assert!(a[1].content.contains("Item ID: fhm-0042"));
        assert!(a[1].content.trim_end().ends_with("last line of your answer."));
        assert!(a[1].image_ref.is_none());
    }

    #[test]
    fn personas_differ_only_in_system_block() {
        let t = PromptTemplates::default();
        let m = build_initial_prompt(&AgentPersona::moderator(), &sample(), Label::Positive, &t).unwrap();
        let u = build_initial_prompt(&AgentPersona::user(), &sample(), Label::Positive, &t).unwrap();
        assert_ne!(m[0], u[0]);
        assert_eq!(m[1..], u[1..]);
    }

    #[test]
    fn classifier_label_hidden_unless_revealed() {
        let mut t = PromptTemplates::default();
        let hidden = build_initial_prompt(&AgentPersona::user(), &sample(), Label::Positive, &t).unwrap();
        assert!(!hidden[1].content.contains("classifier"));
        t.reveal_classifier_label = true;
        t.attach_images = true;
        let shown = build_initial_prompt(&AgentPersona::user(), &sample(), Label::Positive, &t).unwrap();
        assert!(shown[1].content.contains("automated classifier labeled this item POSITIVE"));
        assert_eq!(shown[1].image_ref.as_deref(), Some("img/42.png"));
    }

    #[test]
    fn review_carries_peer_rationale_verbatim() {
        let t = PromptTemplates::default();
        let own = InitialJudgment {
            decision: Decision::Negative,
            rationale: "Looks harmless.".into(),
            raw: "RATIONALE: Looks harmless.\nDECISION: NEGATIVE".into(),
        };
        let peer = InitialJudgment {
            decision: Decision::Positive,
            rationale: "It frames degradation as a compliment.".into(),
            raw: "RATIONALE: It frames degradation as a compliment.\nDECISION: POSITIVE".into(),
        };
        let msgs = build_review_prompt(&AgentPersona::user(), &sample(), Label::Positive, &t, &own, &peer).unwrap();
        assert_eq!(msgs.len(), 4);
        assert_eq!(msgs[2].role, Role::Assistant);
        assert_eq!(msgs[2].content, own.raw);
        assert!(msgs[3].content.contains("the moderator"));
        assert!(msgs[3].content.contains("Their decision: POSITIVE"));
        assert!(msgs[3].content.contains("It frames degradation as a compliment."));

        // agreement still gets a review turn
        let agree = build_review_prompt(&AgentPersona::user(), &sample(), Label::Positive, &t, &peer, &peer).unwrap();
        assert_eq!(agree.len(), 4);

        let garbled = InitialJudgment {
            decision: Decision::Unparseable,
            rationale: "???".into(),
            raw: "I refuse to answer in that format".into(),
        };
        let msgs = build_review_prompt(&AgentPersona::moderator(), &sample(), Label::Positive, &t, &own, &garbled).unwrap();
        assert!(msgs[3].content.contains("UNPARSEABLE"));
        assert!(msgs[3].content.contains("I refuse to answer in that format"));
    }
}
