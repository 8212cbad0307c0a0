//! Agreement between agent codings and human gold labels.
//!
//! Each code is scored one-vs-rest over turns: a turn is a true positive
//! for code `c` when both sets contain `c`, a false positive when only the
//! prediction does, and so on. Ratios with a zero denominator are undefined
//! (`None`), shown as `-`, and never coerced to zero.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::Codebook;
use crate::coder::{CodingRun, RunStatus};
use crate::transcript::{CodeSet, GoldAnnotationSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Predicted set equals the gold set.
    #[default]
    Exact,
    /// Predicted and gold sets share at least one code.
    Overlap,
}

impl MatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::Exact => "exact",
            MatchMode::Overlap => "overlap",
        }
    }

    pub fn matches(self, gold: &CodeSet, predicted: &CodeSet) -> bool {
        match self {
            MatchMode::Exact => gold == predicted,
            MatchMode::Overlap => !gold.is_disjoint(predicted),
        }
    }
}

impl FromStr for MatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(MatchMode::Exact),
            "overlap" => Ok(MatchMode::Overlap),
            other => Err(format!("unknown match mode {other:?} (expected exact or overlap)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("run is {0:?}, not complete")]
    IncompleteRun(RunStatus),
    #[error("gold is for lesson {gold:?} but the run coded {run:?}")]
    LessonMismatch { gold: String, run: String },
    #[error("gold has no labels for turn {0}")]
    MissingGold(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub code_id: String,
    #[serde(flatten)]
    pub counts: Counts,
}

/// One-vs-rest counts for `code_id` over `(gold, predicted)` pairs.
pub fn confusion_of_pairs<'a>(
    pairs: impl IntoIterator<Item = (&'a CodeSet, &'a CodeSet)>,
    code_id: &str,
) -> ConfusionMatrix {
    let mut counts = Counts::default();
    for (gold, predicted) in pairs {
        match (gold.contains(code_id), predicted.contains(code_id)) {
            (true, true) => counts.tp += 1,
            (false, true) => counts.fp += 1,
            (true, false) => counts.fn_ += 1,
            (false, false) => counts.tn += 1,
        }
    }
    ConfusionMatrix {
        code_id: code_id.to_string(),
        counts,
    }
}

/// Gold and predicted sets per coded turn, in run order.
fn aligned<'a>(
    gold: &'a GoldAnnotationSet,
    run: &'a CodingRun,
) -> Result<Vec<(&'a CodeSet, &'a CodeSet)>, EvalError> {
    if run.status != RunStatus::Complete {
        return Err(EvalError::IncompleteRun(run.status));
    }
    if gold.lesson_id != run.lesson_id {
        return Err(EvalError::LessonMismatch {
            gold: gold.lesson_id.clone(),
            run: run.lesson_id.clone(),
        });
    }
    run.codings
        .iter()
        .map(|c| {
            gold.labels
                .get(&c.turn_id)
                .map(|g| (g, &c.predicted))
                .ok_or(EvalError::MissingGold(c.turn_id))
        })
        .collect()
}

pub fn build_confusion(
    gold: &GoldAnnotationSet,
    run: &CodingRun,
    code_id: &str,
) -> Result<ConfusionMatrix, EvalError> {
    Ok(confusion_of_pairs(aligned(gold, run)?, code_id))
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub code_id: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    #[serde(flatten)]
    pub counts: Counts,
}

pub fn metrics(matrix: &ConfusionMatrix) -> MetricRow {
    let Counts { tp, fp, fn_, tn } = matrix.counts;
    MetricRow {
        code_id: matrix.code_id.clone(),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        counts: matrix.counts,
    }
}

/// Harmonic mean of precision and recall; undefined when both are zero.
pub fn f1_from_pr(precision: f64, recall: f64) -> Option<f64> {
    let sum = precision + recall;
    (sum > 0.0).then(|| 2.0 * precision * recall / sum)
}

/// Share of turns whose predicted set matches the gold set under `mode`.
pub fn turn_precision(
    gold: &GoldAnnotationSet,
    run: &CodingRun,
    mode: MatchMode,
) -> Result<f64, EvalError> {
    let pairs = aligned(gold, run)?;
    Ok(turn_precision_of_pairs(&pairs, mode))
}

fn turn_precision_of_pairs(pairs: &[(&CodeSet, &CodeSet)], mode: MatchMode) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let matched = pairs.iter().filter(|(g, p)| mode.matches(g, p)).count();
    matched as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub gold_code: String,
    pub predicted_code: String,
    pub count: u64,
}

/// Counts `(g, p)` for every turn, `g` in gold only and `p` in prediction
/// only. Sorted by count descending, then by code ids.
pub fn confusion_pairs(
    gold: &GoldAnnotationSet,
    run: &CodingRun,
) -> Result<Vec<ConfusionPair>, EvalError> {
    Ok(confusion_pairs_of(&aligned(gold, run)?))
}

fn confusion_pairs_of(pairs: &[(&CodeSet, &CodeSet)]) -> Vec<ConfusionPair> {
    let mut counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    for (gold, predicted) in pairs {
        for g in gold.difference(predicted) {
            for p in predicted.difference(gold) {
                *counts.entry((g.as_str(), p.as_str())).or_default() += 1;
            }
        }
    }
    let mut out: Vec<ConfusionPair> = counts
        .into_iter()
        .map(|((g, p), count)| ConfusionPair {
            gold_code: g.to_string(),
            predicted_code: p.to_string(),
            count,
        })
        .collect();
    // BTreeMap order already gives the lexical tiebreak; the sort is stable.
    out.sort_by(|a, b| b.count.cmp(&a.count));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub codebook_version: String,
    pub per_code: Vec<MetricRow>,
    pub turn_precision: f64,
    pub match_mode: MatchMode,
    pub turn_count: usize,
}

impl MetricsReport {
    pub fn row(&self, code_id: &str) -> Option<&MetricRow> {
        self.per_code.iter().find(|r| r.code_id == code_id)
    }

    pub fn code_ids(&self) -> impl Iterator<Item = &str> {
        self.per_code.iter().map(|r| r.code_id.as_str())
    }
}

/// One row per codebook code, in codebook order, plus turn precision.
pub fn evaluate_run(
    gold: &GoldAnnotationSet,
    run: &CodingRun,
    codebook: &Codebook,
    mode: MatchMode,
) -> Result<MetricsReport, EvalError> {
    let pairs = aligned(gold, run)?;
    Ok(MetricsReport {
        codebook_version: codebook.version().to_string(),
        per_code: codebook
            .ids()
            .map(|id| metrics(&confusion_of_pairs(pairs.iter().copied(), id)))
            .collect(),
        turn_precision: turn_precision_of_pairs(&pairs, mode),
        match_mode: mode,
        turn_count: pairs.len(),
    })
}

/// `51.1%`, or `-` when undefined.
pub fn percent(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:.1}%", v * 100.0),
        None => "-".to_string(),
    }
}

fn plain(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v}"),
        None => "-".to_string(),
    }
}

/// Aligned text table with Precision, Recall, Accuracy and F1 Score
/// columns.
pub fn render_text(report: &MetricsReport) -> String {
    let width = report
        .per_code
        .iter()
        .map(|r| r.code_id.len())
        .max()
        .unwrap_or(0)
        .max("Categories".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>9}  {:>7}  {:>8}  {:>8}",
        "Categories", "Precision", "Recall", "Accuracy", "F1 Score"
    );
    for row in &report.per_code {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>7}  {:>8}  {:>8}",
            row.code_id,
            percent(row.precision),
            percent(row.recall),
            percent(row.accuracy),
            percent(row.f1)
        );
    }
    let _ = writeln!(
        out,
        "\nTurn precision ({}): {} over {} turns",
        report.match_mode.as_str(),
        percent(Some(report.turn_precision)),
        report.turn_count
    );
    out
}

pub fn render_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

/// CSV with header `code,precision,recall,accuracy,f1`; full-precision
/// ratios, `-` when undefined.
pub fn render_csv(report: &MetricsReport) -> String {
    let mut out = String::from("code,precision,recall,accuracy,f1\n");
    for row in &report.per_code {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.code_id,
            plain(row.precision),
            plain(row.recall),
            plain(row.accuracy),
            plain(row.f1)
        );
    }
    out
}
