//! Coding schemes: the code catalogue an annotator (human or agent) applies.
//!
//! A [`Codebook`] is an ordered list of [`Code`]s with unique ids and
//! non-colliding aliases. Exactly one code must be the exclusive "none apply"
//! code [`UNCODED`]. The built-in scheme is the 13-code Cambridge Dialogue
//! Analysis Scheme (CDAS), see [`builtin_cdas`].
//!
//! Codebooks can also be loaded from a small sectioned text format:
//!
//! ```text
//! # comment
//! version = my-scheme-1
//!
//! [code]
//! id = RE
//! name = Reasoning
//! definition = Gives reasons or evidence for a position.
//! keywords = because, therefore
//! exclusions =
//! aliases = R
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Id of the exclusive "none of the codes apply" code.
pub const UNCODED: &str = "UC";

/// Maximum length of a canonical code id.
pub const MAX_ID_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Code {
    pub id: String,
    pub name: String,
    pub definition: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub exclusions: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

impl Code {
    pub fn new(id: &str, name: &str, definition: &str) -> Self {
        Code {
            id: id.to_string(),
            name: name.to_string(),
            definition: definition.to_string(),
            keywords: Vec::new(),
            exclusions: String::new(),
            aliases: Vec::new(),
        }
    }

    pub fn with_keywords(mut self, keywords: &[&str]) -> Self {
        self.keywords = keywords.iter().map(|k| k.to_string()).collect();
        self
    }

    pub fn with_exclusions(mut self, exclusions: &str) -> Self {
        self.exclusions = exclusions.to_string();
        self
    }

    pub fn with_aliases(mut self, aliases: &[&str]) -> Self {
        self.aliases = aliases.iter().map(|a| a.to_string()).collect();
        self
    }

    pub fn is_uncoded(&self) -> bool {
        self.id == UNCODED
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawCodebook")]
pub struct Codebook {
    version: String,
    codes: Vec<Code>,
}

#[derive(Deserialize)]
struct RawCodebook {
    version: String,
    codes: Vec<Code>,
}

impl TryFrom<RawCodebook> for Codebook {
    type Error = CodebookError;

    fn try_from(raw: RawCodebook) -> Result<Self, Self::Error> {
        Codebook::new(raw.version, raw.codes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodebookError {
    #[error("line {line}: invalid code id {id:?} (expected 1-{MAX_ID_LEN} uppercase letters or digits)")]
    InvalidId { line: usize, id: String },
    #[error("line {line}: duplicate code id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: alias {alias:?} of {code:?} collides with {other:?}")]
    AliasCollision {
        line: usize,
        alias: String,
        code: String,
        other: String,
    },
    #[error("codebook has no {UNCODED} code")]
    MissingUncoded,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown code label {label:?}")]
pub struct UnknownLabel {
    pub label: String,
}

impl Codebook {
    /// Builds a validated codebook. Line numbers in errors are 0 because
    /// there is no source document; [`parse_codebook`] reports real lines.
    pub fn new(version: impl Into<String>, codes: Vec<Code>) -> Result<Self, CodebookError> {
        let lines = vec![0; codes.len()];
        Self::validated(version.into(), codes, &lines)
    }

    fn validated(
        version: String,
        codes: Vec<Code>,
        lines: &[usize],
    ) -> Result<Self, CodebookError> {
        // label (uppercased) -> owning code id
        let mut owners: HashMap<String, String> = HashMap::new();
        for (code, &line) in codes.iter().zip(lines) {
            if !is_valid_id(&code.id) {
                return Err(CodebookError::InvalidId {
                    line,
                    id: code.id.clone(),
                });
            }
            match owners.get(&code.id) {
                Some(owner) if owner == &code.id => {
                    return Err(CodebookError::DuplicateId {
                        line,
                        id: code.id.clone(),
                    })
                }
                Some(owner) => {
                    return Err(CodebookError::AliasCollision {
                        line,
                        alias: code.id.clone(),
                        code: owner.clone(),
                        other: code.id.clone(),
                    })
                }
                None => {
                    owners.insert(code.id.clone(), code.id.clone());
                }
            }
        }
        for (code, &line) in codes.iter().zip(lines) {
            for alias in &code.aliases {
                let key = alias.trim().to_uppercase();
                if key.is_empty() {
                    return Err(CodebookError::Malformed {
                        line,
                        message: format!("empty alias on code {}", code.id),
                    });
                }
                match owners.get(&key) {
                    Some(owner) if owner == &code.id => {}
                    Some(owner) => {
                        return Err(CodebookError::AliasCollision {
                            line,
                            alias: alias.clone(),
                            code: code.id.clone(),
                            other: owner.clone(),
                        })
                    }
                    None => {
                        owners.insert(key, code.id.clone());
                    }
                }
            }
        }
        if !codes.iter().any(Code::is_uncoded) {
            return Err(CodebookError::MissingUncoded);
        }
        Ok(Codebook { version, codes })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn codes(&self) -> &[Code] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Canonical ids in codebook order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.codes.iter().map(|c| c.id.as_str())
    }

    /// Every code except [`UNCODED`], in codebook order.
    pub fn substantive(&self) -> impl Iterator<Item = &Code> {
        self.codes.iter().filter(|c| !c.is_uncoded())
    }

    pub fn get(&self, id: &str) -> Option<&Code> {
        self.codes.iter().find(|c| c.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    /// Position of `id` in codebook order.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.codes.iter().position(|c| c.id == id)
    }

    /// Case-insensitive lookup of a label against ids, then aliases.
    pub fn resolve(&self, label: &str) -> Result<&Code, UnknownLabel> {
        let key = label.trim();
        let unknown = || UnknownLabel {
            label: label.to_string(),
        };
        if key.is_empty() {
            return Err(unknown());
        }
        if let Some(code) = self.codes.iter().find(|c| c.id.eq_ignore_ascii_case(key)) {
            return Ok(code);
        }
        let upper = key.to_uppercase();
        self.codes
            .iter()
            .find(|c| c.aliases.iter().any(|a| a.trim().to_uppercase() == upper))
            .ok_or_else(unknown)
    }

    /// Serializes to the sectioned text format accepted by [`parse_codebook`].
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "version = {}", one_line(&self.version));
        for code in &self.codes {
            out.push('\n');
            out.push_str("[code]\n");
            let _ = writeln!(out, "id = {}", code.id);
            let _ = writeln!(out, "name = {}", one_line(&code.name));
            let _ = writeln!(out, "definition = {}", one_line(&code.definition));
            let _ = writeln!(out, "keywords = {}", join_list(&code.keywords));
            let _ = writeln!(out, "exclusions = {}", one_line(&code.exclusions));
            let _ = writeln!(out, "aliases = {}", join_list(&code.aliases));
        }
        out
    }
}

/// Free-function form of [`Codebook::resolve`].
pub fn resolve_code<'a>(codebook: &'a Codebook, label: &str) -> Result<&'a Code, UnknownLabel> {
    codebook.resolve(label)
}

fn is_valid_id(id: &str) -> bool {
    (1..=MAX_ID_LEN).contains(&id.len())
        && id
            .chars()
            .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn join_list(items: &[String]) -> String {
    items
        .iter()
        .map(|s| one_line(s))
        .collect::<Vec<_>>()
        .join(", ")
}

fn split_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Default)]
struct Section {
    line: usize,
    id_line: usize,
    id: Option<String>,
    name: Option<String>,
    definition: Option<String>,
    keywords: Vec<String>,
    exclusions: String,
    aliases: Vec<String>,
}

impl Section {
    fn finish(self) -> Result<(Code, usize), CodebookError> {
        let missing = |key: &str| CodebookError::Malformed {
            line: self.line,
            message: format!("section is missing required key `{key}`"),
        };
        let id = self.id.clone().ok_or_else(|| missing("id"))?;
        let name = self.name.clone().ok_or_else(|| missing("name"))?;
        let definition = self.definition.clone().ok_or_else(|| missing("definition"))?;
        let line = if self.id_line > 0 { self.id_line } else { self.line };
        Ok((
            Code {
                id,
                name,
                definition,
                keywords: self.keywords,
                exclusions: self.exclusions,
                aliases: self.aliases,
            },
            line,
        ))
    }
}

/// Parses and validates a codebook document.
///
/// A `version = ...` line may appear before the first `[code]` section;
/// it defaults to `custom`.
pub fn parse_codebook(source: &str) -> Result<Codebook, CodebookError> {
    let mut version: Option<String> = None;
    let mut sections: Vec<Section> = Vec::new();
    let mut seen_keys: Vec<&str> = Vec::new();

    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') {
            if line != "[code]" {
                return Err(CodebookError::Malformed {
                    line: line_no,
                    message: format!("unknown section header {line:?}"),
                });
            }
            sections.push(Section {
                line: line_no,
                ..Section::default()
            });
            seen_keys.clear();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CodebookError::Malformed {
                line: line_no,
                message: "expected `key = value`".to_string(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        let Some(section) = sections.last_mut() else {
            if key == "version" && version.is_none() {
                version = Some(value.to_string());
                continue;
            }
            return Err(CodebookError::Malformed {
                line: line_no,
                message: format!("key `{key}` outside a [code] section"),
            });
        };
        if seen_keys.contains(&key) {
            return Err(CodebookError::Malformed {
                line: line_no,
                message: format!("key `{key}` repeated within section"),
            });
        }
        match key {
            "id" => {
                section.id = Some(value.to_string());
                section.id_line = line_no;
                seen_keys.push("id");
            }
            "name" => {
                section.name = Some(value.to_string());
                seen_keys.push("name");
            }
            "definition" => {
                section.definition = Some(value.to_string());
                seen_keys.push("definition");
            }
            "keywords" => {
                section.keywords = split_list(value);
                seen_keys.push("keywords");
            }
            "exclusions" => {
                section.exclusions = value.to_string();
                seen_keys.push("exclusions");
            }
            "aliases" => {
                section.aliases = split_list(value);
                seen_keys.push("aliases");
            }
            other => {
                return Err(CodebookError::Malformed {
                    line: line_no,
                    message: format!("unknown key `{other}`"),
                })
            }
        }
    }

    let mut codes = Vec::with_capacity(sections.len());
    let mut lines = Vec::with_capacity(sections.len());
    for section in sections {
        let (code, line) = section.finish()?;
        codes.push(code);
        lines.push(line);
    }
    Codebook::validated(version.unwrap_or_else(|| "custom".to_string()), codes, &lines)
}

/// The 13-code Cambridge Dialogue Analysis Scheme.
///
/// Canonical ids are `IRE` and `IC`; `REI` and `CI` are accepted as aliases.
pub fn builtin_cdas() -> Codebook {
    let codes = vec![
        Code::new(
            "ELI",
            "Elaboration Invitation",
            "Asks someone to extend, assess or clarify something already said.",
        )
        .with_keywords(&["say more", "can you add", "what do you think about", "do you agree"])
        .with_exclusions("Not for requests about work others cannot see, or for procedural follow-ups."),
        Code::new(
            "EL",
            "Elaboration",
            "Extends an earlier contribution with a further idea, detail or angle, even briefly.",
        )
        .with_keywords(&["also", "and", "as well"]),
        Code::new(
            "IRE",
            "Reasoning Invitation",
            "Asks for reasons, justification, speculation or a prediction.",
        )
        .with_keywords(&["why", "what if", "how do you know", "explain"])
        .with_exclusions("Not for requests that only want an answer.")
        .with_aliases(&["REI"]),
        Code::new(
            "RE",
            "Reasoning",
            "Gives reasons, evidence or explanation for a position, including analogies, distinctions and argued speculation.",
        )
        .with_keywords(&[
            "because", "if...then", "so", "therefore", "not...unless", "would", "could", "might",
        ]),
        Code::new(
            "IC",
            "Co-ordination Invitation",
            "Asks speakers to compare, combine or settle two or more ideas.",
        )
        .with_keywords(&["compare", "what is the difference", "which is better"])
        .with_aliases(&["CI"]),
        Code::new(
            "SC",
            "Simple Co-ordination",
            "Summarises or sets ideas side by side, own or others', with no reasons given.",
        )
        .with_keywords(&["both", "same as", "similar to"]),
        Code::new(
            "RC",
            "Reasoned Co-ordination",
            "Compares or combines ideas and backs the comparison with reasons or evidence, including counter-arguments and reasoned agreement.",
        )
        .with_keywords(&["whereas", "but because", "on the other hand"]),
        Code::new(
            "A",
            "Agreement",
            "Openly agrees with or accepts a contribution, including echoing it to show agreement.",
        )
        .with_keywords(&["yes", "i agree", "right", "exactly"]),
        Code::new(
            "Q",
            "Querying",
            "Doubts, challenges or disagrees with a contribution, including sarcasm and pointed questions.",
        )
        .with_keywords(&["disagree", "are you sure", "but"]),
        Code::new(
            "RB",
            "Reference Back",
            "Points back to earlier lessons, shared experiences or prior class knowledge.",
        )
        .with_keywords(&["last week", "remember", "earlier"]),
        Code::new(
            "RW",
            "Reference to Wider Context",
            "Connects the topic to the world beyond the lesson, such as everyday life or outside expertise.",
        )
        .with_keywords(&["in real life", "at home", "in the news"]),
        Code::new(
            "OI",
            "Other Invitation",
            "Any other spoken invitation: questions, calculations, requests for ideas or opinions.",
        )
        .with_keywords(&["what is", "who can", "tell me"])
        .with_exclusions("Not for gestures or other non-verbal prompts."),
        Code::new("UC", "Uncoded", "No other code applies.")
            .with_aliases(&["Uncoded"]),
    ];
    Codebook::new("cdas-2019", codes).expect("built-in CDAS codebook is valid")
}
