use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::Label;

/// An agent's verdict as read from its response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Positive,
    Negative,
    Unparseable,
}

impl Decision {
    pub fn label(self) -> Option<Label> {
        match self {
            Decision::Positive => Some(Label::Positive),
            Decision::Negative => Some(Label::Negative),
            Decision::Unparseable => None,
        }
    }

    pub fn keyword(self) -> &'static str {
        match self {
            Decision::Positive => "POSITIVE",
            Decision::Negative => "NEGATIVE",
            Decision::Unparseable => "UNPARSEABLE",
        }
    }
}

impl From<Label> for Decision {
    fn from(l: Label) -> Self {
        match l {
            Label::Positive => Decision::Positive,
            Label::Negative => Decision::Negative,
        }
    }
}

fn decision_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Tolerates markdown emphasis and headings around the line, nothing else.
    RE.get_or_init(|| {
        Regex::new(r"(?i)^[\s*_#>`]*decision[\s*_`]*:[\s*_`]*(positive|negative)[\s*_`.!]*$").unwrap()
    })
}

/// Reads the verdict from the last `DECISION: POSITIVE|NEGATIVE` line.
pub fn parse_decision(response: &str) -> Decision {
    response
        .lines()
        .rev()
        .find_map(|line| decision_line().captures(line.trim()))
        .map(|c| {
            if c[1].eq_ignore_ascii_case("positive") {
                Decision::Positive
            } else {
                Decision::Negative
            }
        })
        .unwrap_or(Decision::Unparseable)
}

/// The response with its DECISION lines removed and a leading `RATIONALE:`
/// marker stripped.
pub fn extract_rationale(response: &str) -> String {
    let body: Vec<&str> = response
        .lines()
        .filter(|l| !decision_line().is_match(l.trim()))
        .collect();
    let joined = body.join("\n");
    let trimmed = joined.trim();
    let lower = trimmed.to_ascii_lowercase();
    let stripped = lower
        .strip_prefix("rationale:")
        .map(|_| &trimmed["rationale:".len()..])
        .unwrap_or(trimmed);
    stripped.trim().to_string()
}
