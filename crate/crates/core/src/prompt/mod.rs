//! Declarative instruction configs and their compiled, byte-stable form.
//!
//! An [`InstructionConfig`] is compiled by [`compile_instructions`] into an
//! [`InstructionDocument`] whose sections always appear in the order given by
//! [`SectionKind::CANONICAL`]: role preamble, prioritized global rules, code
//! definitions, decision tree, justification rules, stability control, and
//! anchor examples.

mod render;

pub mod examples;
pub mod presets;
pub mod tokens;
pub mod tree;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codebook::{Codebook, UNCODED};

pub use examples::{
    select_examples, validate_example_quota, ExampleItem, ExampleKind, ExampleSelectionSpec,
    ExampleSet, ExampleSource, QuotaReport, QuotaViolation, SelectionError, SelectionMode,
};
pub use tokens::{estimate_tokens, QuarterCharEstimator, TokenEstimator};
pub use tree::{
    validate_decision_tree, Action, Branch, DecisionTree, Step, TreeReport, TreeViolation,
    TreeWarning,
};

/// Default instruction budget, in estimated tokens.
pub const DEFAULT_TOKEN_BUDGET: usize = 8000;

/// Fraction of the budget above which a compiled document is flagged.
pub const BUDGET_WARNING_RATIO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorityRule {
    pub priority: i32,
    pub text: String,
}

impl PriorityRule {
    pub fn new(priority: i32, text: impl Into<String>) -> Self {
        PriorityRule {
            priority,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionConfig {
    pub role_preamble: String,
    #[serde(default)]
    pub global_rules: Vec<PriorityRule>,
    pub codebook: Codebook,
    #[serde(default)]
    pub decision_tree: DecisionTree,
    #[serde(default)]
    pub justification_rules: Vec<String>,
    #[serde(default)]
    pub stability_rules: Vec<String>,
    #[serde(default)]
    pub examples: ExampleSet,
    #[serde(default = "default_budget")]
    pub token_budget: usize,
}

fn default_budget() -> usize {
    DEFAULT_TOKEN_BUDGET
}

impl InstructionConfig {
    /// SHA-256 (hex) over the canonical JSON form: object keys sorted,
    /// no insignificant whitespace.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes to JSON");
        let canonical = serde_json::to_string(&value).expect("JSON value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Copy of this config with the example set replaced.
    pub fn with_examples(&self, examples: ExampleSet) -> Self {
        InstructionConfig {
            examples,
            ..self.clone()
        }
    }

    /// Global rules in rendering order: descending priority, ties kept in
    /// declaration order.
    pub fn ordered_rules(&self) -> Vec<&PriorityRule> {
        let mut rules: Vec<&PriorityRule> = self.global_rules.iter().collect();
        rules.sort_by_key(|r| std::cmp::Reverse(r.priority));
        rules
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    RolePreamble,
    GlobalRules,
    CodeDefinitions,
    DecisionTree,
    JustificationRules,
    StabilityControl,
    Examples,
}

impl SectionKind {
    pub const CANONICAL: [SectionKind; 7] = [
        SectionKind::RolePreamble,
        SectionKind::GlobalRules,
        SectionKind::CodeDefinitions,
        SectionKind::DecisionTree,
        SectionKind::JustificationRules,
        SectionKind::StabilityControl,
        SectionKind::Examples,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SectionKind::RolePreamble => "role_preamble",
            SectionKind::GlobalRules => "global_rules",
            SectionKind::CodeDefinitions => "code_definitions",
            SectionKind::DecisionTree => "decision_tree",
            SectionKind::JustificationRules => "justification_rules",
            SectionKind::StabilityControl => "stability_control",
            SectionKind::Examples => "examples",
        }
    }
}

/// Byte range `[start, end)` of one section within the document text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSpan {
    pub section: SectionKind,
    pub start: usize,
    pub end: usize,
}

impl SectionSpan {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionDocument {
    pub text: String,
    pub section_map: Vec<SectionSpan>,
    pub token_estimate: usize,
    pub token_budget: usize,
    pub config_hash: String,
}

/// JSON metadata written next to an exported document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSidecar {
    pub section_map: Vec<SectionSpan>,
    pub token_estimate: usize,
    pub token_budget: usize,
    pub config_hash: String,
}

impl InstructionDocument {
    pub fn section(&self, kind: SectionKind) -> &str {
        self.section_map
            .iter()
            .find(|s| s.section == kind)
            .map(|s| &self.text[s.range()])
            .unwrap_or("")
    }

    pub fn near_budget(&self) -> bool {
        self.token_estimate as f64 >= self.token_budget as f64 * BUDGET_WARNING_RATIO
    }

    pub fn sidecar(&self) -> DocumentSidecar {
        DocumentSidecar {
            section_map: self.section_map.clone(),
            token_estimate: self.token_estimate,
            token_budget: self.token_budget,
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn from_parts(text: String, sidecar: DocumentSidecar) -> Self {
        InstructionDocument {
            text,
            section_map: sidecar.section_map,
            token_estimate: sidecar.token_estimate,
            token_budget: sidecar.token_budget,
            config_hash: sidecar.config_hash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompileError {
    #[error("instruction document needs {estimate} tokens, budget is {budget}")]
    OverBudget { estimate: usize, budget: usize },
    #[error("token budget must be positive")]
    ZeroBudget,
    #[error("role preamble is empty")]
    EmptyPreamble,
    #[error("invalid decision tree: {}", .0.summary())]
    InvalidTree(TreeReport),
    #[error("example {item}: unknown code {code:?}")]
    UnknownExampleCode { item: usize, code: String },
    #[error("example {item}: gold codes are empty")]
    EmptyExampleCodes { item: usize },
    #[error("example {item}: {UNCODED} combined with other codes")]
    ExampleUncodedNotExclusive { item: usize },
    #[error("example {item}: context_codes has {codes} entries for {turns} context turns")]
    ContextCodesMismatch {
        item: usize,
        codes: usize,
        turns: usize,
    },
}

/// Compiles with the default `ceil(chars / 4)` token estimator.
pub fn compile_instructions(config: &InstructionConfig) -> Result<InstructionDocument, CompileError> {
    compile_instructions_with(config, &QuarterCharEstimator)
}

pub fn compile_instructions_with(
    config: &InstructionConfig,
    estimator: &dyn TokenEstimator,
) -> Result<InstructionDocument, CompileError> {
    validate_config(config)?;
    let (text, section_map) = render::render(config);
    let token_estimate = estimator.estimate(&text);
    if token_estimate > config.token_budget {
        return Err(CompileError::OverBudget {
            estimate: token_estimate,
            budget: config.token_budget,
        });
    }
    Ok(InstructionDocument {
        text,
        section_map,
        token_estimate,
        token_budget: config.token_budget,
        config_hash: config.config_hash(),
    })
}

fn validate_config(config: &InstructionConfig) -> Result<(), CompileError> {
    if config.token_budget == 0 {
        return Err(CompileError::ZeroBudget);
    }
    if config.role_preamble.trim().is_empty() {
        return Err(CompileError::EmptyPreamble);
    }
    let report = validate_decision_tree(&config.decision_tree, &config.codebook);
    if !report.is_valid() {
        return Err(CompileError::InvalidTree(report));
    }
    for (i, item) in config.examples.items.iter().enumerate() {
        let item_no = i + 1;
        check_codes(&config.codebook, &item.gold_codes, item_no)?;
        if !item.context_codes.is_empty() {
            if item.context_codes.len() != item.context_turns.len() {
                return Err(CompileError::ContextCodesMismatch {
                    item: item_no,
                    codes: item.context_codes.len(),
                    turns: item.context_turns.len(),
                });
            }
            for codes in &item.context_codes {
                check_codes(&config.codebook, codes, item_no)?;
            }
        }
    }
    Ok(())
}

fn check_codes(
    codebook: &Codebook,
    codes: &crate::transcript::CodeSet,
    item: usize,
) -> Result<(), CompileError> {
    if codes.is_empty() {
        return Err(CompileError::EmptyExampleCodes { item });
    }
    if let Some(code) = codes.iter().find(|c| !codebook.contains(c)) {
        return Err(CompileError::UnknownExampleCode {
            item,
            code: code.clone(),
        });
    }
    if codes.contains(UNCODED) && codes.len() > 1 {
        return Err(CompileError::ExampleUncodedNotExclusive { item });
    }
    Ok(())
}
