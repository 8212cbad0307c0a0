//! Batched coding sessions against a pluggable chat backend.
//!
//! [`code_lesson`] splits a lesson into batches, sends each batch in a
//! (by default fresh) session that opens with the instruction document,
//! parses the reply into [`TurnCoding`]s and reports every step as a
//! [`RunEvent`]. The returned [`CodingRun`] is the fold of those events, so
//! replaying a persisted log reproduces it exactly.

mod backend;
mod feedback;
mod request;
mod response;
mod run;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::transcript::{CodeSet, DEFAULT_BATCH_SIZE};

pub use backend::{Backend, BackendError, ChatMessage, Role, Session};
pub use feedback::{inject_feedback, FeedbackError, FeedbackItem};
pub use request::{parse_batch_request, render_batch_request, REQUEST_INSTRUCTION, SELF_CHECK_LINE};
pub use response::{
    parse_agent_response, parse_codes_line, render_reference_response, ParseError, ParseWarning,
    ParsedResponse,
};
pub use run::{
    code_lesson, code_lesson_observed, stability_probe, verify_rules, CodeError, ProbeOutcome,
    VerificationExchange, STABILITY_WINDOW, VERIFICATION_PROBES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionPolicy {
    pub batch_size: usize,
    pub reset_between_batches: bool,
    pub verify_rules_first: bool,
    pub stability_probe: bool,
    pub self_check_suffix: bool,
}

impl Default for SessionPolicy {
    fn default() -> Self {
        SessionPolicy {
            batch_size: DEFAULT_BATCH_SIZE,
            reset_between_batches: true,
            verify_rules_first: true,
            stability_probe: false,
            self_check_suffix: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnCoding {
    pub turn_id: u32,
    pub predicted: CodeSet,
    #[serde(default)]
    pub justification: String,
    /// Byte range of this turn's block in the raw response.
    pub raw_span: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    #[default]
    Pending,
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    /// 1-based batch ordinal; 0 means the rule-verification exchange.
    pub batch_ordinal: usize,
    pub reason: String,
}

/// What an exchange was for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExchangePurpose {
    Verification,
    Batch,
    StabilityProbe { turn_id: u32 },
}

/// One request/response round trip within a session. When `new_session` is
/// set, the session opened with the instruction document as its system
/// message before `sent`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchExchange {
    pub ordinal: usize,
    pub session: usize,
    pub new_session: bool,
    pub purpose: ExchangePurpose,
    pub sent: ChatMessage,
    pub response: String,
    /// 1 on the first try, 2 after a transport retry.
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStarted {
    pub run_id: String,
    pub lesson_id: String,
    pub config_hash: String,
    pub backend_id: String,
    pub policy: SessionPolicy,
    pub turn_count: usize,
    pub batch_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchParsed {
    pub ordinal: usize,
    pub codings: Vec<TurnCoding>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Progress of a coding run. Persisted logs hold these plus the
/// review-cycle events of [`crate::store::LogEvent`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum RunEvent {
    RunStarted(RunStarted),
    BatchSent(BatchExchange),
    BatchParsed(BatchParsed),
    RunCompleted,
    RunFailed(RunFailure),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CodingRun {
    pub run_id: String,
    pub lesson_id: String,
    pub config_hash: String,
    pub backend_id: String,
    pub policy: SessionPolicy,
    pub status: RunStatus,
    pub turn_count: usize,
    pub batch_count: usize,
    pub batches_done: usize,
    pub codings: Vec<TurnCoding>,
    pub event_log: Vec<BatchExchange>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<RunFailure>,
}

impl CodingRun {
    /// Folds one event into the run state.
    pub fn apply(&mut self, event: &RunEvent) {
        match event {
            RunEvent::RunStarted(s) => {
                *self = CodingRun {
                    run_id: s.run_id.clone(),
                    lesson_id: s.lesson_id.clone(),
                    config_hash: s.config_hash.clone(),
                    backend_id: s.backend_id.clone(),
                    policy: s.policy,
                    status: RunStatus::Running,
                    turn_count: s.turn_count,
                    batch_count: s.batch_count,
                    ..CodingRun::default()
                };
            }
            RunEvent::BatchSent(exchange) => self.event_log.push(exchange.clone()),
            RunEvent::BatchParsed(parsed) => {
                self.codings.extend(parsed.codings.iter().cloned());
                self.warnings.extend(
                    parsed
                        .warnings
                        .iter()
                        .map(|w| format!("batch {}: {w}", parsed.ordinal)),
                );
                self.batches_done += 1;
            }
            RunEvent::RunCompleted => self.status = RunStatus::Complete,
            RunEvent::RunFailed(failure) => {
                self.status = RunStatus::Failed;
                self.failure = Some(failure.clone());
            }
        }
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a RunEvent>) -> Self {
        let mut run = CodingRun::default();
        for e in events {
            run.apply(e);
        }
        run
    }

    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    pub fn coding(&self, turn_id: u32) -> Option<&TurnCoding> {
        self.codings.iter().find(|c| c.turn_id == turn_id)
    }

    pub fn session_count(&self) -> usize {
        self.event_log.iter().map(|e| e.session + 1).max().unwrap_or(0)
    }

    /// Messages of one session in order, excluding the opening system
    /// message.
    pub fn session_transcript(&self, session: usize) -> Vec<ChatMessage> {
        self.event_log
            .iter()
            .filter(|e| e.session == session)
            .flat_map(|e| [e.sent.clone(), ChatMessage::assistant(e.response.clone())])
            .collect()
    }
}
