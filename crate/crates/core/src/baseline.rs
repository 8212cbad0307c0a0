//! Deterministic keyword-rule coder and the `mock-keyword` backend.
//!
//! The rules are single-turn cue matches. They are not a faithful CDAS
//! coder ("so" and "would" fire on plenty of non-reasoning talk); their job
//! is to give the pipeline a predictable, fully offline stand-in for a
//! model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Codebook, UNCODED};
use crate::coder::{
    parse_batch_request, render_reference_response, Backend, BackendError, ChatMessage, Role,
    TurnCoding,
};
use crate::transcript::{CodeSet, Turn};

pub const MOCK_BACKEND_ID: &str = "mock-keyword";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Trigger {
    /// A word or phrase, matched on whole words, case-insensitively.
    Contains(String),
    /// The first phrase occurs somewhere before the second.
    ContainsPattern(String, String),
    /// The trimmed text ends with this suffix.
    EndsWith(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub code_id: String,
    pub trigger: Trigger,
    /// The rule is skipped when any of these codes already matched.
    #[serde(default, skip_serializing_if = "CodeSet::is_empty")]
    pub unless: CodeSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRuleSet {
    pub rules: Vec<KeywordRule>,
    pub default_code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("codebook has no code {0:?}, which the default rules need")]
    MissingCode(String),
}

const INVITATIONS: [&str; 4] = ["ELI", "IRE", "IC", "OI"];

/// The default rule table, in precedence order:
///
/// | code | trigger |
/// |------|---------|
/// | IRE  | "why", "what if" |
/// | A    | "yes", "i agree" |
/// | Q    | "disagree", "are you sure" |
/// | RE   | "because", "therefore", "so", "would", "could", "might", "if" ... "then" |
/// | OI   | ends with "?" unless an invitation code already matched |
///
/// Nothing matching means `UC`.
pub fn default_keyword_rules(codebook: &Codebook) -> Result<KeywordRuleSet, RuleError> {
    for id in ["IRE", "A", "Q", "RE", "OI", UNCODED]
        .into_iter()
        .chain(INVITATIONS)
    {
        if !codebook.contains(id) {
            return Err(RuleError::MissingCode(id.to_string()));
        }
    }
    let contains = |code: &str, phrases: &[&str]| {
        phrases
            .iter()
            .map(|p| KeywordRule {
                code_id: code.to_string(),
                trigger: Trigger::Contains(p.to_string()),
                unless: CodeSet::new(),
            })
            .collect::<Vec<_>>()
    };
    let mut rules = Vec::new();
    rules.extend(contains("IRE", &["why", "what if"]));
    rules.extend(contains("A", &["yes", "i agree"]));
    rules.extend(contains("Q", &["disagree", "are you sure"]));
    rules.extend(contains(
        "RE",
        &["because", "therefore", "so", "would", "could", "might"],
    ));
    rules.push(KeywordRule {
        code_id: "RE".into(),
        trigger: Trigger::ContainsPattern("if".into(), "then".into()),
        unless: CodeSet::new(),
    });
    rules.push(KeywordRule {
        code_id: "OI".into(),
        trigger: Trigger::EndsWith("?".into()),
        unless: INVITATIONS.iter().map(|s| s.to_string()).collect(),
    });
    Ok(KeywordRuleSet {
        rules,
        default_code: UNCODED.to_string(),
    })
}

/// Lowercase word tokens: runs of alphanumerics and apostrophes.
fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '’'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase().replace('’', "'"))
        .collect()
}

/// Start positions of `phrase` as a contiguous word sequence in `tokens`.
fn phrase_positions(tokens: &[String], phrase: &str) -> Vec<usize> {
    let needle = words(phrase);
    if needle.is_empty() || needle.len() > tokens.len() {
        return Vec::new();
    }
    (0..=tokens.len() - needle.len())
        .filter(|&i| tokens[i..i + needle.len()] == needle[..])
        .collect()
}

fn fires(trigger: &Trigger, text: &str, tokens: &[String]) -> bool {
    match trigger {
        Trigger::Contains(phrase) => !phrase_positions(tokens, phrase).is_empty(),
        Trigger::ContainsPattern(first, second) => {
            let a = phrase_positions(tokens, first);
            let b = phrase_positions(tokens, second);
            match (a.first(), b.last()) {
                (Some(first), Some(last)) => first < last,
                _ => false,
            }
        }
        Trigger::EndsWith(suffix) => text.trim_end().ends_with(suffix.as_str()),
    }
}

/// Every code whose rule fires, or the default code when none do.
pub fn keyword_code_turn(turn: &Turn, rules: &KeywordRuleSet) -> CodeSet {
    let tokens = words(&turn.text);
    let mut codes = CodeSet::new();
    for rule in &rules.rules {
        if codes.contains(&rule.code_id) || rule.unless.iter().any(|c| codes.contains(c)) {
            continue;
        }
        if fires(&rule.trigger, &turn.text, &tokens) {
            codes.insert(rule.code_id.clone());
        }
    }
    if codes.is_empty() {
        codes.insert(rules.default_code.clone());
    }
    codes
}

pub const VERIFICATION_REPLY: &str = "Understood. A turn can contain several utterances; \
each one is checked against the decision tree and the turn receives every code that applies.";

pub const PROBE_REPLY: &str = "Yes, the coding is consistent.";

/// A [`Backend`] that answers batch requests with keyword-rule codings in
/// the reference response layout, and all other messages with fixed text.
#[derive(Debug, Clone)]
pub struct KeywordBackend {
    rules: KeywordRuleSet,
}

impl KeywordBackend {
    pub fn new(rules: KeywordRuleSet) -> Self {
        KeywordBackend { rules }
    }

    pub fn for_codebook(codebook: &Codebook) -> Result<Self, RuleError> {
        default_keyword_rules(codebook).map(Self::new)
    }

    pub fn rules(&self) -> &KeywordRuleSet {
        &self.rules
    }

    /// The reply to a single message.
    pub fn reply(&self, message: &str) -> String {
        match parse_batch_request(message) {
            Some(turns) => {
                let codings: Vec<TurnCoding> = turns
                    .iter()
                    .map(|t| TurnCoding {
                        turn_id: t.turn_id,
                        predicted: keyword_code_turn(t, &self.rules),
                        justification: "keyword rules".to_string(),
                        raw_span: 0..0,
                    })
                    .collect();
                render_reference_response(&turns, &codings)
            }
            None if message.contains("Is this coding consistent with it?") => PROBE_REPLY.to_string(),
            None => VERIFICATION_REPLY.to_string(),
        }
    }
}

impl Backend for KeywordBackend {
    fn id(&self) -> &str {
        MOCK_BACKEND_ID
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn send(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let last = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::Rejected("no user message".into()))?;
        Ok(self.reply(&last.content))
    }
}
