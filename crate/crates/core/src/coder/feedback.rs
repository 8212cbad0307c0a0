use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::UNCODED;
use crate::prompt::{
    compile_instructions, CompileError, ExampleItem, ExampleKind, ExampleSource, InstructionConfig,
};
use crate::transcript::{CodeSet, Lesson};

/// A human correction of one agent-coded turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub turn_id: u32,
    pub agent_codes: CodeSet,
    pub adjudicated_codes: CodeSet,
    #[serde(default)]
    pub note: String,
}

impl FeedbackItem {
    /// Checks the adjudicated set: non-empty, known codes, `UC` alone.
    pub fn validate(&self, config: &InstructionConfig) -> Result<(), FeedbackError> {
        if self.adjudicated_codes.is_empty() {
            return Err(FeedbackError::EmptyCodes {
                turn_id: self.turn_id,
            });
        }
        if let Some(code) = self
            .adjudicated_codes
            .iter()
            .find(|c| !config.codebook.contains(c))
        {
            return Err(FeedbackError::UnknownCode {
                turn_id: self.turn_id,
                code: code.clone(),
            });
        }
        if self.adjudicated_codes.contains(UNCODED) && self.adjudicated_codes.len() > 1 {
            return Err(FeedbackError::UncodedNotExclusive {
                turn_id: self.turn_id,
            });
        }
        Ok(())
    }

    /// The anchor example this correction turns into.
    pub fn to_example(&self, lesson: &Lesson) -> Result<ExampleItem, FeedbackError> {
        let turn = lesson.turn(self.turn_id).ok_or(FeedbackError::UnknownTurn {
            turn_id: self.turn_id,
        })?;
        Ok(ExampleItem {
            kind: ExampleKind::Ambiguous,
            context_turns: Vec::new(),
            context_codes: Vec::new(),
            focus_turn: turn.clone(),
            gold_codes: self.adjudicated_codes.clone(),
            rationale: (!self.note.trim().is_empty()).then(|| self.note.trim().to_string()),
            source: ExampleSource::Adjudicated,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeedbackError {
    #[error("turn {turn_id} is not in the lesson")]
    UnknownTurn { turn_id: u32 },
    #[error("turn {turn_id}: adjudicated codes are empty")]
    EmptyCodes { turn_id: u32 },
    #[error("turn {turn_id}: unknown code {code:?}")]
    UnknownCode { turn_id: u32, code: String },
    #[error("turn {turn_id}: {UNCODED} combined with other codes")]
    UncodedNotExclusive { turn_id: u32 },
    #[error("turn {turn_id}: gold and agent codes already agree")]
    NoDisagreement { turn_id: u32 },
    #[error("refined config does not compile: {0}")]
    Compile(#[from] CompileError),
}

/// Returns a copy of `config` with one adjudicated example per feedback
/// item. The result must still compile within its token budget. An empty
/// feedback list returns an identical config.
pub fn inject_feedback(
    config: &InstructionConfig,
    feedback: &[FeedbackItem],
    lesson: &Lesson,
) -> Result<InstructionConfig, FeedbackError> {
    if feedback.is_empty() {
        return Ok(config.clone());
    }
    let mut examples = config.examples.clone();
    for item in feedback {
        item.validate(config)?;
        examples.items.push(item.to_example(lesson)?);
    }
    let refined = config.with_examples(examples);
    compile_instructions(&refined)?;
    Ok(refined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::presets::cdas_config;
    use crate::transcript::Turn;

    fn set(ids: &[&str]) -> CodeSet {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn lesson(n: u32) -> Lesson {
        Lesson {
            lesson_id: "fb".into(),
            subject: String::new(),
            turns: (1..=n)
                .map(|i| Turn::new(i, "Teacher", format!("Right, and the next one is {i}.")))
                .collect(),
        }
    }

    fn item(turn_id: u32) -> FeedbackItem {
        FeedbackItem {
            turn_id,
            agent_codes: set(&["A"]),
            adjudicated_codes: set(&["EL"]),
            note: "adds a fact rather than agreeing".into(),
        }
    }

    #[test]
    fn one_item_adds_one_example() {
        let config = cdas_config();
        let refined = inject_feedback(&config, &[item(12)], &lesson(20)).unwrap();
        assert_eq!(refined.examples.len(), config.examples.len() + 1);
        let added = refined.examples.items.last().unwrap();
        assert_eq!(added.kind, ExampleKind::Ambiguous);
        assert_eq!(added.source, ExampleSource::Adjudicated);
        assert_eq!(added.focus_turn.turn_id, 12);
        assert_ne!(refined.config_hash(), config.config_hash());
        assert_eq!(config, cdas_config());
        let doc = compile_instructions(&refined).unwrap();
        assert!(doc.text.contains("### Adjudicated examples"));
    }

    #[test]
    fn empty_feedback_is_identity() {
        let config = cdas_config();
        let same = inject_feedback(&config, &[], &lesson(3)).unwrap();
        assert_eq!(same, config);
        assert_eq!(same.config_hash(), config.config_hash());
    }

    #[test]
    fn many_items_blow_a_tight_budget() {
        let mut config = cdas_config();
        config.token_budget = compile_instructions(&config).unwrap().token_estimate + 200;
        let items: Vec<_> = (1..=500).map(item).collect();
        assert!(matches!(
            inject_feedback(&config, &items, &lesson(500)).unwrap_err(),
            FeedbackError::Compile(CompileError::OverBudget { .. })
        ));
    }

    #[test]
    fn bad_items_rejected() {
        let config = cdas_config();
        assert_eq!(
            inject_feedback(&config, &[item(99)], &lesson(3)).unwrap_err(),
            FeedbackError::UnknownTurn { turn_id: 99 }
        );
        let mut bad = item(1);
        bad.adjudicated_codes = set(&["UC", "A"]);
        assert_eq!(
            inject_feedback(&config, &[bad], &lesson(3)).unwrap_err(),
            FeedbackError::UncodedNotExclusive { turn_id: 1 }
        );
    }
}
