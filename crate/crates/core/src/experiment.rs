//! Example-size experiments and feedback refinement cycles.
//!
//! An experiment codes one held-out lesson under several conditions. The
//! conditions share a base config and differ only in how anchor examples
//! are drawn from a separate corpus, so their compiled documents differ only
//! in the examples section.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::Codebook;
use crate::coder::{
    code_lesson_observed, inject_feedback, Backend, CodeError, CodingRun, FeedbackError,
    FeedbackItem, RunEvent, SessionPolicy,
};
use crate::evaluation::{
    confusion_pairs, evaluate_run, percent, ConfusionPair, EvalError, MatchMode, MetricsReport,
};
use crate::prompt::presets::cdas_config;
use crate::prompt::{
    compile_instructions, select_examples, CompileError, ExampleItem, ExampleSelectionSpec,
    InstructionConfig, InstructionDocument, SectionKind, SelectionError, SelectionMode,
};
use crate::store::valid_id;
use crate::synthetic::{synthetic_corpus, synthetic_lesson};
use crate::transcript::{
    parse_gold, parse_transcript, GoldAnnotationSet, GoldError, Lesson, TranscriptError,
};

pub const CREDENTIAL_ENV_DEFAULT: &str = "CODER_BACKEND_KEY";

/// Token budget of the built-in experiment's base config: large enough for
/// 500 contextual example turns.
pub const BUILTIN_TOKEN_BUDGET: usize = 120_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub condition_id: String,
    pub selection: SelectionMode,
    pub seed: u64,
}

impl ConditionSpec {
    pub fn selection_spec(&self) -> ExampleSelectionSpec {
        ExampleSelectionSpec {
            mode: self.selection,
            seed: self.seed,
        }
    }
}

/// Which backend to code with. Only the id and connection details live
/// here; credentials are read from the named environment variable at run
/// time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "id")]
pub enum BackendSpec {
    #[serde(rename = "mock-keyword")]
    MockKeyword,
    #[serde(rename = "chat-http")]
    ChatHttp {
        endpoint: String,
        model: String,
        #[serde(default = "default_credential_env")]
        credential_env: String,
    },
}

fn default_credential_env() -> String {
    CREDENTIAL_ENV_DEFAULT.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LessonFiles {
    pub transcript: PathBuf,
    pub gold: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum LessonSource {
    Files(LessonFiles),
    Synthetic {
        lesson_id: String,
        turns: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CorpusSource {
    Files { lessons: Vec<LessonFiles> },
    Synthetic {
        prefix: String,
        lessons: usize,
        turns_per_lesson: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentDefinition {
    pub experiment_id: String,
    pub base_config: InstructionConfig,
    pub conditions: Vec<ConditionSpec>,
    pub example_corpus: CorpusSource,
    pub test_lesson: LessonSource,
    #[serde(default)]
    pub policy: SessionPolicy,
    pub backend: BackendSpec,
    #[serde(default)]
    pub match_mode: MatchMode,
}

/// Lessons and gold labels an experiment runs over.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentInputs {
    pub corpus: Vec<Lesson>,
    pub corpus_gold: Vec<GoldAnnotationSet>,
    pub test_lesson: Lesson,
    pub test_gold: GoldAnnotationSet,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Transcript {
        path: PathBuf,
        source: TranscriptError,
    },
    #[error("{path}: {source}")]
    Gold { path: PathBuf, source: GoldError },
    #[error("experiment definition is invalid: {0}")]
    Definition(String),
    #[error("example corpus contains the test lesson {0:?}")]
    Overlap(String),
    #[error("condition {condition}: {source}")]
    Selection {
        condition: String,
        source: SelectionError,
    },
    #[error("condition {condition}: {source}")]
    Compile {
        condition: String,
        source: CompileError,
    },
    #[error("condition {condition}: {source}")]
    Code {
        condition: String,
        source: CodeError,
    },
    #[error("condition {condition}: run failed at batch {batch}: {reason}")]
    RunFailed {
        condition: String,
        batch: usize,
        reason: String,
    },
    #[error("condition {condition}: {source}")]
    Eval {
        condition: String,
        source: EvalError,
    },
    #[error(transparent)]
    Compare(#[from] CompareError),
}

fn read(path: &Path) -> Result<String, ExperimentError> {
    std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_files(
    files: &LessonFiles,
    base: &Path,
    codebook: &Codebook,
) -> Result<(Lesson, GoldAnnotationSet), ExperimentError> {
    let tpath = base.join(&files.transcript);
    let gpath = base.join(&files.gold);
    let lesson = parse_transcript(&read(&tpath)?).map_err(|source| ExperimentError::Transcript {
        path: tpath.clone(),
        source,
    })?;
    let gold = parse_gold(&read(&gpath)?, &lesson, codebook)
        .map_err(|source| ExperimentError::Gold { path: gpath, source })?;
    Ok((lesson, gold))
}

impl ExperimentDefinition {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let def: ExperimentDefinition =
            serde_json::from_str(text).map_err(|e| ExperimentError::Definition(e.to_string()))?;
        def.check()?;
        Ok(def)
    }

    /// Structural checks that need no files.
    pub fn check(&self) -> Result<(), ExperimentError> {
        if !valid_id(&self.experiment_id) {
            return Err(ExperimentError::Definition(format!(
                "experiment_id {:?} must be 1-128 characters of A-Z a-z 0-9 - _ .",
                self.experiment_id
            )));
        }
        if self.conditions.len() < 2 {
            return Err(ExperimentError::Definition(
                "an experiment needs at least two conditions".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for c in &self.conditions {
            if !valid_id(&c.condition_id) {
                return Err(ExperimentError::Definition(format!(
                    "condition id {:?} is not a valid id",
                    c.condition_id
                )));
            }
            if !seen.insert(c.condition_id.as_str()) {
                return Err(ExperimentError::Definition(format!(
                    "condition id {:?} is repeated",
                    c.condition_id
                )));
            }
        }
        if self.policy.batch_size == 0 {
            return Err(ExperimentError::Definition("policy.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Loads or generates the corpus and test lesson. Relative file paths
    /// resolve against `base_dir`.
    pub fn load_inputs(&self, base_dir: &Path) -> Result<ExperimentInputs, ExperimentError> {
        let codebook = &self.base_config.codebook;
        let (corpus, corpus_gold) = match &self.example_corpus {
            CorpusSource::Synthetic {
                prefix,
                lessons,
                turns_per_lesson,
                seed,
            } => synthetic_corpus(prefix, *lessons, *turns_per_lesson, *seed),
            CorpusSource::Files { lessons } => lessons
                .iter()
                .map(|f| load_files(f, base_dir, codebook))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .unzip(),
        };
        let (test_lesson, test_gold) = match &self.test_lesson {
            LessonSource::Synthetic {
                lesson_id,
                turns,
                seed,
            } => synthetic_lesson(lesson_id, *turns, *seed),
            LessonSource::Files(f) => load_files(f, base_dir, codebook)?,
        };
        Ok(ExperimentInputs {
            corpus,
            corpus_gold,
            test_lesson,
            test_gold,
        })
    }
}

/// The four example-size conditions: one isolated example per code, ten
/// per code, then 120 and 500 turns of contextual dialogue, all coded by
/// the keyword mock on a 1386-turn synthetic test lesson.
pub fn builtin_experiment() -> ExperimentDefinition {
    let mut base_config = cdas_config();
    base_config.token_budget = BUILTIN_TOKEN_BUDGET;
    let contextual = |total_n| SelectionMode::ContextualFlow { total_n, window: 6 };
    ExperimentDefinition {
        experiment_id: "cdas-example-size".into(),
        base_config,
        conditions: vec![
            ConditionSpec {
                condition_id: "condition-1".into(),
                selection: SelectionMode::PerCodeIsolated { k: 1 },
                seed: 1,
            },
            ConditionSpec {
                condition_id: "condition-2".into(),
                selection: SelectionMode::PerCodeIsolated { k: 10 },
                seed: 2,
            },
            ConditionSpec {
                condition_id: "condition-3".into(),
                selection: contextual(120),
                seed: 3,
            },
            ConditionSpec {
                condition_id: "condition-4".into(),
                selection: contextual(500),
                seed: 4,
            },
        ],
        example_corpus: CorpusSource::Synthetic {
            prefix: "example-lesson".into(),
            lessons: 30,
            turns_per_lesson: 120,
            seed: 2024,
        },
        test_lesson: LessonSource::Synthetic {
            lesson_id: "test-lesson".into(),
            turns: 1386,
            seed: 7,
        },
        policy: SessionPolicy::default(),
        backend: BackendSpec::MockKeyword,
        match_mode: MatchMode::Exact,
    }
}

/// Artifacts of one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionOutcome {
    pub condition_id: String,
    pub config: InstructionConfig,
    pub document: InstructionDocument,
    pub run: CodingRun,
    pub events: Vec<RunEvent>,
    pub report: MetricsReport,
}

/// Selects examples, compiles, codes the test lesson and evaluates it.
#[allow(clippy::too_many_arguments)]
pub fn run_condition(
    inputs: &ExperimentInputs,
    spec: &ConditionSpec,
    base_config: &InstructionConfig,
    backend: &dyn Backend,
    policy: &SessionPolicy,
    mode: MatchMode,
) -> Result<ConditionOutcome, ExperimentError> {
    let test_id = &inputs.test_lesson.lesson_id;
    if inputs.corpus.iter().any(|l| &l.lesson_id == test_id) {
        return Err(ExperimentError::Overlap(test_id.clone()));
    }
    let condition = || spec.condition_id.clone();
    let examples = select_examples(
        &inputs.corpus,
        &inputs.corpus_gold,
        &spec.selection_spec(),
        &base_config.codebook,
    )
    .map_err(|source| ExperimentError::Selection {
        condition: condition(),
        source,
    })?;
    let config = base_config.with_examples(examples);
    let document = compile_instructions(&config).map_err(|source| ExperimentError::Compile {
        condition: condition(),
        source,
    })?;
    let mut events = Vec::new();
    let run = code_lesson_observed(
        &spec.condition_id,
        &inputs.test_lesson,
        &document,
        &config.codebook,
        backend,
        policy,
        &mut |e| events.push(e.clone()),
    )
    .map_err(|source| ExperimentError::Code {
        condition: condition(),
        source,
    })?;
    if let Some(failure) = &run.failure {
        return Err(ExperimentError::RunFailed {
            condition: condition(),
            batch: failure.batch_ordinal,
            reason: failure.reason.clone(),
        });
    }
    let report = evaluate_run(&inputs.test_gold, &run, &config.codebook, mode).map_err(|source| {
        ExperimentError::Eval {
            condition: condition(),
            source,
        }
    })?;
    Ok(ConditionOutcome {
        condition_id: spec.condition_id.clone(),
        config,
        document,
        run,
        events,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error("need at least two reports, got {0}")]
    TooFew(usize),
    #[error("condition {condition} was scored with a different codebook")]
    CodebookMismatch { condition: String },
}

/// Precision per code (rows) and condition (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub conditions: Vec<String>,
    pub code_ids: Vec<String>,
    /// `precision[c][k]`: condition `c`, code `k`.
    pub precision: Vec<Vec<Option<f64>>>,
    pub turn_precision: Vec<f64>,
    pub match_mode: MatchMode,
}

impl ComparisonTable {
    pub fn cell(&self, condition: &str, code_id: &str) -> Option<Option<f64>> {
        let c = self.conditions.iter().position(|x| x == condition)?;
        let k = self.code_ids.iter().position(|x| x == code_id)?;
        Some(self.precision[c][k])
    }

    /// Codes down, conditions across, precision as percentages.
    pub fn render_text(&self) -> String {
        let label = format!("Turns ({})", self.match_mode.as_str());
        let code_w = self
            .code_ids
            .iter()
            .map(String::len)
            .chain([label.len(), "Categories".len()])
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = self.conditions.iter().map(|c| c.len().max(6)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<code_w$}", "Categories");
        for (c, w) in self.conditions.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for (k, code) in self.code_ids.iter().enumerate() {
            let _ = write!(out, "{code:<code_w$}");
            for (c, w) in widths.iter().enumerate() {
                let _ = write!(out, "  {:>w$}", percent(self.precision[c][k]));
            }
            out.push('\n');
        }
        let _ = write!(out, "{label:<code_w$}");
        for (tp, w) in self.turn_precision.iter().zip(&widths) {
            let _ = write!(out, "  {:>w$}", percent(Some(*tp)));
        }
        out.push('\n');
        out
    }
}

pub fn compare_conditions(reports: &[(String, MetricsReport)]) -> Result<ComparisonTable, CompareError> {
    if reports.len() < 2 {
        return Err(CompareError::TooFew(reports.len()));
    }
    let (_, first) = &reports[0];
    let code_ids: Vec<String> = first.code_ids().map(str::to_string).collect();
    for (condition, report) in reports {
        if report.codebook_version != first.codebook_version
            || !report.code_ids().eq(code_ids.iter().map(String::as_str))
            || report.match_mode != first.match_mode
        {
            return Err(CompareError::CodebookMismatch {
                condition: condition.clone(),
            });
        }
    }
    Ok(ComparisonTable {
        conditions: reports.iter().map(|(c, _)| c.clone()).collect(),
        code_ids,
        precision: reports
            .iter()
            .map(|(_, r)| r.per_code.iter().map(|row| row.precision).collect())
            .collect(),
        turn_precision: reports.iter().map(|(_, r)| r.turn_precision).collect(),
        match_mode: first.match_mode,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub experiment_id: String,
    pub conditions: Vec<ConditionOutcome>,
    pub table: ComparisonTable,
}

/// Runs every condition (concurrently, each in its own sessions) and
/// compares them.
pub fn run_experiment(
    def: &ExperimentDefinition,
    inputs: &ExperimentInputs,
    backend: &dyn Backend,
) -> Result<ExperimentOutcome, ExperimentError> {
    def.check()?;
    let results: Vec<Result<ConditionOutcome, ExperimentError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = def
            .conditions
            .iter()
            .map(|spec| {
                scope.spawn(move || {
                    run_condition(inputs, spec, &def.base_config, backend, &def.policy, def.match_mode)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("condition thread panicked"))
            .collect()
    });
    let conditions = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<(String, MetricsReport)> = conditions
        .iter()
        .map(|c| (c.condition_id.clone(), c.report.clone()))
        .collect();
    let table = compare_conditions(&reports)?;
    Ok(ExperimentOutcome {
        experiment_id: def.experiment_id.clone(),
        conditions,
        table,
    })
}

/// True when the two documents are identical outside `section`.
pub fn differs_only_in(a: &InstructionDocument, b: &InstructionDocument, section: SectionKind) -> bool {
    SectionKind::CANONICAL
        .into_iter()
        .filter(|k| *k != section)
        .all(|k| a.section(k) == b.section(k))
}

/// One refinement step: the config before and after adjudicated examples
/// were added, and the disagreements that prompted them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub cycle: usize,
    pub old_config_hash: String,
    pub new_config_hash: String,
    pub feedback: Vec<FeedbackItem>,
    pub added_examples: Vec<ExampleItem>,
    pub confusion_pairs: Vec<ConfusionPair>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LineageError {
    #[error("cycle {cycle} starts from {found}, expected {expected}")]
    BrokenChain {
        cycle: usize,
        expected: String,
        found: String,
    },
    #[error("cycle {cycle} recorded index {found}")]
    BadIndex { cycle: usize, found: usize },
    #[error("cycle {cycle} replays to {found}, recorded {expected}")]
    HashMismatch {
        cycle: usize,
        expected: String,
        found: String,
    },
}

/// Append-only, hash-linked list of refinement steps.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Lineage {
    pub entries: Vec<LineageEntry>,
}

impl Lineage {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head(&self) -> Option<&str> {
        self.entries.last().map(|e| e.new_config_hash.as_str())
    }

    pub fn append(&mut self, entry: LineageEntry) -> Result<(), LineageError> {
        if entry.cycle != self.entries.len() {
            return Err(LineageError::BadIndex {
                cycle: self.entries.len(),
                found: entry.cycle,
            });
        }
        if let Some(head) = self.head() {
            if head != entry.old_config_hash {
                return Err(LineageError::BrokenChain {
                    cycle: entry.cycle,
                    expected: head.to_string(),
                    found: entry.old_config_hash,
                });
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Re-applies every step to `base`, checking each hash on the way.
    pub fn replay(&self, base: &InstructionConfig) -> Result<InstructionConfig, LineageError> {
        let mut config = base.clone();
        for entry in &self.entries {
            let hash = config.config_hash();
            if hash != entry.old_config_hash {
                return Err(LineageError::BrokenChain {
                    cycle: entry.cycle,
                    expected: entry.old_config_hash.clone(),
                    found: hash,
                });
            }
            if !entry.added_examples.is_empty() {
                let mut examples = config.examples.clone();
                examples.items.extend(entry.added_examples.iter().cloned());
                config = config.with_examples(examples);
            }
            let hash = config.config_hash();
            if hash != entry.new_config_hash {
                return Err(LineageError::HashMismatch {
                    cycle: entry.cycle,
                    expected: entry.new_config_hash.clone(),
                    found: hash,
                });
            }
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RefineOptions {
    pub cycle: usize,
    /// Accept adjudications on turns where gold and prediction agree.
    pub allow_agreements: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub feedback: Vec<FeedbackItem>,
    pub config: InstructionConfig,
    pub entry: LineageEntry,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefineError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("turn {0} was not coded in this run")]
    UncodedTurn(u32),
}

/// Turns adjudications into adjudicated examples on a new config and
/// records the step. Agent codes on each feedback item are taken from the
/// run.
pub fn refinement_cycle(
    run: &CodingRun,
    gold: &GoldAnnotationSet,
    adjudications: &[FeedbackItem],
    config: &InstructionConfig,
    lesson: &Lesson,
    options: RefineOptions,
) -> Result<Refinement, RefineError> {
    let pairs = confusion_pairs(gold, run)?;
    let mut feedback = Vec::with_capacity(adjudications.len());
    for adj in adjudications {
        let coding = run
            .coding(adj.turn_id)
            .ok_or(RefineError::UncodedTurn(adj.turn_id))?;
        let gold_codes = gold
            .labels
            .get(&adj.turn_id)
            .ok_or(EvalError::MissingGold(adj.turn_id))?;
        if !options.allow_agreements && *gold_codes == coding.predicted {
            return Err(FeedbackError::NoDisagreement {
                turn_id: adj.turn_id,
            }
            .into());
        }
        feedback.push(FeedbackItem {
            agent_codes: coding.predicted.clone(),
            ..adj.clone()
        });
    }
    let refined = inject_feedback(config, &feedback, lesson)?;
    let added_examples = refined.examples.items[config.examples.len()..].to_vec();
    let entry = LineageEntry {
        cycle: options.cycle,
        old_config_hash: config.config_hash(),
        new_config_hash: refined.config_hash(),
        feedback: feedback.clone(),
        added_examples,
        confusion_pairs: pairs,
    };
    Ok(Refinement {
        feedback,
        config: refined,
        entry,
    })
}
