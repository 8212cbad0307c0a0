//! Lesson transcripts, human gold annotations, and coding batches.
//!
//! Transcript files are tab-separated, one turn per line:
//!
//! ```text
//! # lesson_id: maths-07
//! # subject: maths
//! 1	Teacher	Morning, everyone.
//! 2	Maya	Is it 12 because three fours are 12?
//! ```
//!
//! Gold files map a turn id to one or more code labels:
//!
//! ```text
//! 1	UC
//! 2	RE,OI
//! ```
//!
//! Tabs, newlines, and backslashes inside fields are written as `\t`, `\n`
//! and `\\`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Codebook, UNCODED};

/// A set of canonical code ids. Iterates in lexical order.
pub type CodeSet = BTreeSet<String>;

/// Default maximum number of turns per coding batch.
pub const DEFAULT_BATCH_SIZE: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Turn {
    pub turn_id: u32,
    pub speaker: String,
    pub text: String,
}

impl Turn {
    pub fn new(turn_id: u32, speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Turn {
            turn_id,
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lesson {
    pub lesson_id: String,
    pub subject: String,
    pub turns: Vec<Turn>,
}

impl Lesson {
    pub fn turn(&self, turn_id: u32) -> Option<&Turn> {
        self.turns
            .binary_search_by_key(&turn_id, |t| t.turn_id)
            .ok()
            .map(|i| &self.turns[i])
    }

    pub fn turn_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.turns.iter().map(|t| t.turn_id)
    }

    /// Serializes to the transcript file format. Output of this function
    /// parses back to an equal lesson and re-serializes byte-identically.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        if !self.lesson_id.is_empty() {
            let _ = writeln!(out, "# lesson_id: {}", escape_field(&self.lesson_id));
        }
        if !self.subject.is_empty() {
            let _ = writeln!(out, "# subject: {}", escape_field(&self.subject));
        }
        for turn in &self.turns {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                turn.turn_id,
                escape_field(&turn.speaker),
                escape_field(&turn.text)
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotationSet {
    pub lesson_id: String,
    pub labels: BTreeMap<u32, CodeSet>,
}

impl GoldAnnotationSet {
    pub fn codes(&self, turn_id: u32) -> Option<&CodeSet> {
        self.labels.get(&turn_id)
    }

    pub fn to_document(&self) -> String {
        let mut out = String::new();
        for (turn_id, codes) in &self.labels {
            let list: Vec<&str> = codes.iter().map(String::as_str).collect();
            let _ = writeln!(out, "{turn_id}\t{}", list.join(","));
        }
        out
    }
}

/// A contiguous run of turns coded within one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Batch<'a> {
    pub lesson_id: &'a str,
    /// 1-based.
    pub ordinal: usize,
    pub turns: &'a [Turn],
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranscriptError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: turn id {turn_id} does not increase on previous id {previous}")]
    NonIncreasing {
        line: usize,
        turn_id: u32,
        previous: u32,
    },
    #[error("line {line}: turn {turn_id} has an empty utterance")]
    EmptyUtterance { line: usize, turn_id: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GoldError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: turn {turn_id} is not in lesson {lesson_id:?}")]
    UnknownTurn {
        line: usize,
        turn_id: u32,
        lesson_id: String,
    },
    #[error("line {line}: unknown code label {label:?}")]
    UnknownCode { line: usize, label: String },
    #[error("line {line}: turn {turn_id} combines {UNCODED} with other codes")]
    UncodedNotExclusive { line: usize, turn_id: u32 },
    #[error("line {line}: turn {turn_id} annotated twice")]
    DuplicateTurn { line: usize, turn_id: u32 },
    #[error("turn {turn_id} has no gold annotation")]
    MissingTurn { turn_id: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum BatchError {
    #[error("cannot batch an empty lesson")]
    EmptyLesson,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
}

/// How unannotated lesson turns are treated when reading gold labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldCompleteness {
    /// Every turn must be annotated.
    #[default]
    Strict,
    /// Unannotated turns are labelled `UC`.
    Lenient,
}

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

/// Inverse of [`escape_field`]. Unknown escapes are kept verbatim.
pub fn unescape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

fn parse_turn_id(field: &str) -> Result<u32, String> {
    match field.trim().parse::<u32>() {
        Ok(0) => Err("turn id must be positive".to_string()),
        Ok(id) => Ok(id),
        Err(_) => Err(format!("invalid turn id {field:?}")),
    }
}

pub fn parse_transcript(source: &str) -> Result<Lesson, TranscriptError> {
    let mut lesson = Lesson {
        lesson_id: String::new(),
        subject: String::new(),
        turns: Vec::new(),
    };
    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if let Some(comment) = raw.strip_prefix('#') {
            if lesson.turns.is_empty() {
                if let Some((key, value)) = comment.split_once(':') {
                    let value = unescape_field(value.trim());
                    match key.trim() {
                        "lesson_id" => lesson.lesson_id = value,
                        "subject" => lesson.subject = value,
                        _ => {}
                    }
                }
            }
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(TranscriptError::Malformed {
                line,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let turn_id = parse_turn_id(fields[0])
            .map_err(|message| TranscriptError::Malformed { line, message })?;
        if let Some(prev) = lesson.turns.last() {
            if turn_id <= prev.turn_id {
                return Err(TranscriptError::NonIncreasing {
                    line,
                    turn_id,
                    previous: prev.turn_id,
                });
            }
        }
        let speaker = unescape_field(fields[1]);
        if speaker.trim().is_empty() {
            return Err(TranscriptError::Malformed {
                line,
                message: "empty speaker".to_string(),
            });
        }
        let text = unescape_field(fields[2]);
        if text.trim().is_empty() {
            return Err(TranscriptError::EmptyUtterance { line, turn_id });
        }
        lesson.turns.push(Turn {
            turn_id,
            speaker,
            text,
        });
    }
    Ok(lesson)
}

/// Parses gold labels in strict mode.
pub fn parse_gold(
    source: &str,
    lesson: &Lesson,
    codebook: &Codebook,
) -> Result<GoldAnnotationSet, GoldError> {
    parse_gold_with(source, lesson, codebook, GoldCompleteness::Strict)
}

pub fn parse_gold_with(
    source: &str,
    lesson: &Lesson,
    codebook: &Codebook,
    completeness: GoldCompleteness,
) -> Result<GoldAnnotationSet, GoldError> {
    let mut labels: BTreeMap<u32, CodeSet> = BTreeMap::new();
    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((id_field, codes_field)) = raw.split_once('\t') else {
            return Err(GoldError::Malformed {
                line,
                message: "expected `<turn_id><TAB><codes>`".to_string(),
            });
        };
        if codes_field.contains('\t') {
            return Err(GoldError::Malformed {
                line,
                message: "too many fields".to_string(),
            });
        }
        let turn_id =
            parse_turn_id(id_field).map_err(|message| GoldError::Malformed { line, message })?;
        if lesson.turn(turn_id).is_none() {
            return Err(GoldError::UnknownTurn {
                line,
                turn_id,
                lesson_id: lesson.lesson_id.clone(),
            });
        }
        let mut codes = CodeSet::new();
        for label in codes_field.split(',').map(str::trim).filter(|l| !l.is_empty()) {
            let code = codebook.resolve(label).map_err(|_| GoldError::UnknownCode {
                line,
                label: label.to_string(),
            })?;
            codes.insert(code.id.clone());
        }
        if codes.is_empty() {
            return Err(GoldError::Malformed {
                line,
                message: format!("turn {turn_id} has no codes"),
            });
        }
        if codes.contains(UNCODED) && codes.len() > 1 {
            return Err(GoldError::UncodedNotExclusive { line, turn_id });
        }
        if labels.insert(turn_id, codes).is_some() {
            return Err(GoldError::DuplicateTurn { line, turn_id });
        }
    }
    for turn in &lesson.turns {
        if labels.contains_key(&turn.turn_id) {
            continue;
        }
        match completeness {
            GoldCompleteness::Strict => {
                return Err(GoldError::MissingTurn {
                    turn_id: turn.turn_id,
                })
            }
            GoldCompleteness::Lenient => {
                labels.insert(turn.turn_id, CodeSet::from([UNCODED.to_string()]));
            }
        }
    }
    Ok(GoldAnnotationSet {
        lesson_id: lesson.lesson_id.clone(),
        labels,
    })
}

/// Splits a lesson into `ceil(n / max_size)` contiguous batches; every batch
/// except possibly the last holds exactly `max_size` turns.
pub fn make_batches(lesson: &Lesson, max_size: usize) -> Result<Vec<Batch<'_>>, BatchError> {
    if max_size == 0 {
        return Err(BatchError::ZeroBatchSize);
    }
    if lesson.turns.is_empty() {
        return Err(BatchError::EmptyLesson);
    }
    Ok(lesson
        .turns
        .chunks(max_size)
        .enumerate()
        .map(|(i, turns)| Batch {
            lesson_id: &lesson.lesson_id,
            ordinal: i + 1,
            turns,
        })
        .collect())
}
