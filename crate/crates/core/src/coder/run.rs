use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::backend::{Backend, BackendError, ChatMessage, Session};
use super::request::render_batch_request;
use super::response::{parse_agent_response, parse_codes_line, ParseWarning};
use super::{
    BatchExchange, BatchParsed, CodingRun, ExchangePurpose, RunEvent, RunFailure, RunStarted,
    SessionPolicy, TurnCoding,
};
use crate::codebook::{Codebook, UNCODED};
use crate::prompt::InstructionDocument;
use crate::transcript::{make_batches, BatchError, Lesson, Turn};

/// Questions sent before any coding when rule verification is on.
pub const VERIFICATION_PROBES: [&str; 3] = [
    "Before we begin, describe how you code a turn that contains several utterances.",
    "Explain when a turn should be coded as Uncoded.",
    "Explain how you use the decision tree steps to choose codes.",
];

/// How many preceding coded turns are searched for a stability precedent.
pub const STABILITY_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodeError {
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("lesson {0:?} has no turns")]
    EmptyLesson(String),
    #[error("instruction document needs {estimate} tokens, budget is {budget}")]
    OverBudget { estimate: usize, budget: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationExchange {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeOutcome {
    pub question: String,
    pub answer: String,
    /// New coding for the probed turn, when the answer carried a `Codes:`
    /// line.
    pub revised: Option<TurnCoding>,
    pub attempt: u32,
}

fn exchange_with_retry(session: &mut Session<'_>, message: &str) -> Result<(String, u32), BackendError> {
    match session.exchange(message) {
        Ok(reply) => Ok((reply, 1)),
        Err(e) if e.is_transient() => {
            log::warn!("retrying after {e}");
            session.exchange(message).map(|reply| (reply, 2))
        }
        Err(e) => Err(e),
    }
}

/// Sends the fixed verification probes in a session of their own and
/// records the answers.
pub fn verify_rules(
    document: &InstructionDocument,
    backend: &dyn Backend,
) -> Result<Vec<VerificationExchange>, BackendError> {
    let mut session = Session::open(backend, &document.text);
    VERIFICATION_PROBES
        .iter()
        .map(|q| {
            let (answer, _) = exchange_with_retry(&mut session, q)?;
            Ok(VerificationExchange {
                question: q.to_string(),
                answer,
            })
        })
        .collect()
}

fn join_codes(coding: &TurnCoding) -> String {
    coding
        .predicted
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(", ")
}

fn probe_question(turn: &Turn, precedent: &TurnCoding) -> String {
    format!(
        "Turn {} ({}): {}\nAn earlier similar turn was coded [{}]. Is this coding consistent with it?",
        turn.turn_id,
        turn.speaker,
        turn.text,
        join_codes(precedent)
    )
}

/// Asks the session whether `turn`'s coding agrees with an earlier,
/// similarly coded turn. The coding is only revised when the answer holds a
/// `Codes:` line with known labels.
pub fn stability_probe(
    session: &mut Session<'_>,
    turn: &Turn,
    precedent: &TurnCoding,
    codebook: &Codebook,
) -> Result<ProbeOutcome, BackendError> {
    let question = probe_question(turn, precedent);
    let (answer, attempt) = exchange_with_retry(session, &question)?;
    let revised = revise_from_answer(&answer, turn.turn_id, codebook);
    Ok(ProbeOutcome {
        question,
        answer,
        revised,
        attempt,
    })
}

fn revise_from_answer(answer: &str, turn_id: u32, codebook: &Codebook) -> Option<TurnCoding> {
    let mut last = None;
    let mut offset = 0;
    for raw in answer.split_inclusive('\n') {
        if let Some(parsed) = parse_codes_line(raw.trim_end(), codebook) {
            last = Some(parsed);
        }
        offset += raw.len();
    }
    let mut predicted = last?.ok()?;
    if predicted.is_empty() {
        predicted.insert(UNCODED.to_string());
    } else if predicted.len() > 1 {
        predicted.remove(UNCODED);
    }
    Some(TurnCoding {
        turn_id,
        predicted,
        justification: String::new(),
        raw_span: 0..offset,
    })
}

fn failure(batch_ordinal: usize, reason: String) -> RunEvent {
    RunEvent::RunFailed(RunFailure {
        batch_ordinal,
        reason,
    })
}

/// [`code_lesson_observed`] with run id `"run"` and no observer.
pub fn code_lesson(
    lesson: &Lesson,
    document: &InstructionDocument,
    codebook: &Codebook,
    backend: &dyn Backend,
    policy: &SessionPolicy,
) -> Result<CodingRun, CodeError> {
    code_lesson_observed("run", lesson, document, codebook, backend, policy, &mut |_| {})
}

/// Codes a whole lesson batch by batch.
///
/// Preconditions (batch size, non-empty lesson, document within budget)
/// fail with `Err`. Anything that goes wrong after the run starts ends it
/// with status `failed` and the failing batch ordinal instead. Every event
/// is passed to `observer` as it happens; the returned run equals
/// [`CodingRun::replay`] over them.
pub fn code_lesson_observed(
    run_id: &str,
    lesson: &Lesson,
    document: &InstructionDocument,
    codebook: &Codebook,
    backend: &dyn Backend,
    policy: &SessionPolicy,
    observer: &mut dyn FnMut(&RunEvent),
) -> Result<CodingRun, CodeError> {
    if document.token_estimate > document.token_budget {
        return Err(CodeError::OverBudget {
            estimate: document.token_estimate,
            budget: document.token_budget,
        });
    }
    let batches = make_batches(lesson, policy.batch_size).map_err(|e| match e {
        BatchError::ZeroBatchSize => CodeError::ZeroBatchSize,
        BatchError::EmptyLesson => CodeError::EmptyLesson(lesson.lesson_id.clone()),
    })?;

    let mut run = CodingRun::default();
    let mut emit = |event: RunEvent| {
        run.apply(&event);
        observer(&event);
    };
    emit(RunEvent::RunStarted(RunStarted {
        run_id: run_id.to_string(),
        lesson_id: lesson.lesson_id.clone(),
        config_hash: document.config_hash.clone(),
        backend_id: backend.id().to_string(),
        policy: *policy,
        turn_count: lesson.turns.len(),
        batch_count: batches.len(),
    }));

    let mut session_index = 0usize;

    if policy.verify_rules_first {
        let mut session = Session::open(backend, &document.text);
        for (i, question) in VERIFICATION_PROBES.iter().enumerate() {
            match exchange_with_retry(&mut session, question) {
                Ok((answer, attempt)) => emit(RunEvent::BatchSent(BatchExchange {
                    ordinal: 0,
                    session: session_index,
                    new_session: i == 0,
                    purpose: ExchangePurpose::Verification,
                    sent: ChatMessage::user(*question),
                    response: answer,
                    attempt,
                })),
                Err(e) => {
                    emit(failure(0, e.to_string()));
                    return Ok(run);
                }
            }
        }
        session_index += 1;
    }

    let mut session: Option<Session<'_>> = None;
    let mut recent: VecDeque<TurnCoding> = VecDeque::with_capacity(STABILITY_WINDOW);
    for batch in &batches {
        let new_session = session.is_none() || policy.reset_between_batches;
        if new_session {
            if session.is_some() {
                session_index += 1;
            }
            session = Some(Session::open(backend, &document.text));
        }
        let live = session.as_mut().expect("session is open");
        let request = render_batch_request(batch, policy.self_check_suffix);
        let (response, attempt) = match exchange_with_retry(live, &request) {
            Ok(r) => r,
            Err(e) => {
                emit(failure(batch.ordinal, e.to_string()));
                return Ok(run);
            }
        };
        emit(RunEvent::BatchSent(BatchExchange {
            ordinal: batch.ordinal,
            session: session_index,
            new_session,
            purpose: ExchangePurpose::Batch,
            sent: ChatMessage::user(request),
            response: response.clone(),
            attempt,
        }));
        let parsed = match parse_agent_response(&response, batch, codebook) {
            Ok(p) => p,
            Err(e) => {
                emit(failure(batch.ordinal, e.to_string()));
                return Ok(run);
            }
        };
        let mut warnings: Vec<String> = parsed
            .warnings
            .iter()
            .filter(|w| {
                policy.self_check_suffix || !matches!(w, ParseWarning::MissingSelfCheck { .. })
            })
            .map(ToString::to_string)
            .collect();
        let mut codings = parsed.codings;

        if policy.stability_probe {
            for (turn, coding) in batch.turns.iter().zip(codings.iter_mut()) {
                let precedent = recent
                    .iter()
                    .rev()
                    .find(|p| p.predicted == coding.predicted)
                    .cloned();
                if let Some(precedent) = precedent {
                    let outcome = match stability_probe(live, turn, &precedent, codebook) {
                        Ok(o) => o,
                        Err(e) => {
                            emit(failure(batch.ordinal, e.to_string()));
                            return Ok(run);
                        }
                    };
                    if let Some(revised) = &outcome.revised {
                        if revised.predicted != coding.predicted {
                            warnings.push(format!(
                                "turn {}: stability probe revised codes to {}",
                                turn.turn_id,
                                join_codes(revised)
                            ));
                        }
                        coding.predicted = revised.predicted.clone();
                    }
                    emit(RunEvent::BatchSent(BatchExchange {
                        ordinal: batch.ordinal,
                        session: session_index,
                        new_session: false,
                        purpose: ExchangePurpose::StabilityProbe {
                            turn_id: turn.turn_id,
                        },
                        sent: ChatMessage::user(outcome.question),
                        response: outcome.answer,
                        attempt: outcome.attempt,
                    }));
                }
                if recent.len() == STABILITY_WINDOW {
                    recent.pop_front();
                }
                recent.push_back(coding.clone());
            }
        }

        emit(RunEvent::BatchParsed(BatchParsed {
            ordinal: batch.ordinal,
            codings,
            warnings,
        }));
    }
    emit(RunEvent::RunCompleted);
    Ok(run)
}
