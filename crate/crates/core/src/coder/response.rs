use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::request::SELF_CHECK_LINE;
use super::TurnCoding;
use crate::codebook::{Codebook, UNCODED};
use crate::transcript::{escape_field, Batch, CodeSet, Turn};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("turn {turn_id}: no block in the response")]
    MissingBlock { turn_id: u32 },
    #[error("turn {turn_id}: more than one block in the response")]
    DuplicateBlock { turn_id: u32 },
    #[error("turn {turn_id}: unknown code {label:?}")]
    UnknownCode { turn_id: u32, label: String },
    #[error("turn {turn_id}: block has no `Codes:` line")]
    MissingCodes { turn_id: u32 },
}

impl ParseError {
    pub fn turn_id(&self) -> u32 {
        match self {
            ParseError::MissingBlock { turn_id }
            | ParseError::DuplicateBlock { turn_id }
            | ParseError::UnknownCode { turn_id, .. }
            | ParseError::MissingCodes { turn_id } => *turn_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseWarning {
    /// A block for a turn outside the batch; ignored.
    UnexpectedBlock { turn_id: u32 },
    /// `UC` listed with other codes; `UC` was dropped.
    UncodedDropped { turn_id: u32 },
    MissingSelfCheck { turn_id: u32 },
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::UnexpectedBlock { turn_id } => {
                write!(f, "ignored block for turn {turn_id}, which is not in the batch")
            }
            ParseWarning::UncodedDropped { turn_id } => {
                write!(f, "turn {turn_id}: dropped {UNCODED} listed alongside other codes")
            }
            ParseWarning::MissingSelfCheck { turn_id } => {
                write!(f, "turn {turn_id}: no self-check line")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedResponse {
    pub codings: Vec<TurnCoding>,
    pub warnings: Vec<ParseWarning>,
}

fn is_emphasis(c: char) -> bool {
    c == '*' || c == '_'
}

/// Turn id of a block header such as `Turn 241 – Teacher`, `**Turn 241**`
/// or `### Turn 241 (Maya):`.
fn header_id(line: &str) -> Option<u32> {
    let s = line.trim_start_matches(|c: char| c == '#' || is_emphasis(c) || c.is_whitespace());
    let head = s.get(..4)?;
    if !head.eq_ignore_ascii_case("turn") {
        return None;
    }
    let s = &s[4..];
    let s = s.trim_start_matches(is_emphasis);
    let trimmed = s.trim_start();
    if trimmed.len() == s.len() {
        return None;
    }
    let digits = trimmed.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let id = trimmed[..digits].parse().ok()?;
    let rest = trimmed[digits..].trim_start_matches(|c: char| is_emphasis(c) || c.is_whitespace());
    match rest.chars().next() {
        None | Some('–' | '\u{2014}' | '-' | ':' | '(' | '[' | '|' | ',') => Some(id),
        _ => None,
    }
}

/// Strips list markers, quote markers, headings and emphasis, returning the
/// text after `key:` when the line starts with that key.
fn keyed<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let s = line.trim_start_matches(|c: char| {
        c == '#' || c == '>' || c == '-' || is_emphasis(c) || c.is_whitespace()
    });
    let head = s.get(..key.len())?;
    if !head.eq_ignore_ascii_case(key) {
        return None;
    }
    let rest = s[key.len()..].trim_start_matches(is_emphasis);
    rest.strip_prefix(':')
}

/// Labels from a `Codes:` line, or `None` when the line is not one. Empty
/// label lists come back as an empty set.
pub fn parse_codes_line(line: &str, codebook: &Codebook) -> Option<Result<CodeSet, String>> {
    let cleaned: String = line.chars().filter(|c| !is_emphasis(*c)).collect();
    let rest = keyed(&cleaned, "codes")?;
    let mut codes = CodeSet::new();
    for label in rest.split([',', ';']) {
        let label = label.trim().trim_end_matches('.').trim();
        if label.is_empty() {
            continue;
        }
        match codebook.resolve(label) {
            Ok(code) => {
                codes.insert(code.id.clone());
            }
            Err(_) => return Some(Err(label.to_string())),
        }
    }
    Some(Ok(codes))
}

fn justification_of(line: &str) -> Option<String> {
    let rest = keyed(line, "justification")?;
    Some(
        rest.trim_start_matches(|c: char| is_emphasis(c) || c.is_whitespace())
            .trim_end_matches(|c: char| is_emphasis(c) || c.is_whitespace())
            .to_string(),
    )
}

fn is_self_check(line: &str) -> bool {
    let cleaned: String = line.chars().filter(|c| !is_emphasis(*c)).collect();
    let cleaned = cleaned.trim().trim_end_matches('.').to_ascii_lowercase();
    cleaned == SELF_CHECK_LINE.trim_end_matches('.').to_ascii_lowercase()
}

struct Block<'a> {
    turn_id: u32,
    span: Range<usize>,
    lines: Vec<&'a str>,
}

fn split_blocks(response: &str) -> Vec<Block<'_>> {
    let mut blocks: Vec<Block<'_>> = Vec::new();
    let mut offset = 0;
    for raw in response.split_inclusive('\n') {
        let line = raw.trim_end_matches(['\n', '\r']);
        if let Some(turn_id) = header_id(line) {
            if let Some(last) = blocks.last_mut() {
                last.span.end = offset;
            }
            blocks.push(Block {
                turn_id,
                span: offset..response.len(),
                lines: Vec::new(),
            });
        } else if let Some(block) = blocks.last_mut() {
            block.lines.push(line);
        }
        offset += raw.len();
    }
    blocks
}

/// Parses an agent reply into one coding per batch turn, in batch order.
///
/// Each turn's block starts at its `Turn <id>` header. The last `Codes:`
/// line in the block wins; an empty list becomes `{UC}`, and `UC` listed
/// with other codes is dropped with a warning. The justification is the
/// `Justification:` line, or failing that the text after the codes line.
pub fn parse_agent_response(
    response: &str,
    batch: &Batch<'_>,
    codebook: &Codebook,
) -> Result<ParsedResponse, ParseError> {
    let wanted: BTreeMap<u32, usize> = batch
        .turns
        .iter()
        .enumerate()
        .map(|(i, t)| (t.turn_id, i))
        .collect();
    let mut found: Vec<Option<Block<'_>>> = batch.turns.iter().map(|_| None).collect();
    let mut warnings = Vec::new();
    for block in split_blocks(response) {
        match wanted.get(&block.turn_id) {
            None => warnings.push(ParseWarning::UnexpectedBlock {
                turn_id: block.turn_id,
            }),
            Some(&i) if found[i].is_some() => {
                return Err(ParseError::DuplicateBlock {
                    turn_id: block.turn_id,
                })
            }
            Some(&i) => found[i] = Some(block),
        }
    }

    let mut codings = Vec::with_capacity(batch.turns.len());
    for (turn, block) in batch.turns.iter().zip(found) {
        let turn_id = turn.turn_id;
        let block = block.ok_or(ParseError::MissingBlock { turn_id })?;
        let mut codes_at = None;
        for (i, line) in block.lines.iter().enumerate() {
            if let Some(parsed) = parse_codes_line(line, codebook) {
                let codes =
                    parsed.map_err(|label| ParseError::UnknownCode { turn_id, label })?;
                codes_at = Some((i, codes));
            }
        }
        let (codes_line, mut predicted) = codes_at.ok_or(ParseError::MissingCodes { turn_id })?;
        if predicted.is_empty() {
            predicted.insert(UNCODED.to_string());
        } else if predicted.len() > 1 && predicted.remove(UNCODED) {
            warnings.push(ParseWarning::UncodedDropped { turn_id });
        }
        let justification = block
            .lines
            .iter()
            .rev()
            .find_map(|l| justification_of(l))
            .unwrap_or_else(|| {
                block.lines[codes_line + 1..]
                    .iter()
                    .map(|l| l.trim())
                    .filter(|l| !l.is_empty() && !is_self_check(l))
                    .collect::<Vec<_>>()
                    .join(" ")
            });
        if !block.lines.iter().any(|l| is_self_check(l)) {
            warnings.push(ParseWarning::MissingSelfCheck { turn_id });
        }
        codings.push(TurnCoding {
            turn_id,
            predicted,
            justification,
            raw_span: block.span,
        });
    }
    Ok(ParsedResponse { codings, warnings })
}

/// Renders codings in the block layout [`parse_agent_response`] reads:
/// header with speaker, quoted transcript, codes, justification and the
/// self-check line. Pairs `turns[i]` with `codings[i]`.
pub fn render_reference_response(turns: &[Turn], codings: &[TurnCoding]) -> String {
    let mut out = String::new();
    for (turn, coding) in turns.iter().zip(codings) {
        let codes: Vec<&str> = coding.predicted.iter().map(String::as_str).collect();
        out.push_str(&format!(
            "Turn {} – {}\n\nTranscript:\n\"{}\"\n\nCodes: {}\nJustification: {}\n{}\n\n",
            coding.turn_id,
            escape_field(&turn.speaker),
            escape_field(&turn.text),
            codes.join(", "),
            coding.justification.replace(['\n', '\r'], " ").trim(),
            SELF_CHECK_LINE,
        ));
    }
    out
}
