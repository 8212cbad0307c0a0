//! Store-backed workflows shared by the command line and the HTTP API.

use dialogic_core::baseline::{KeywordBackend, MOCK_BACKEND_ID};
use dialogic_core::codebook::Codebook;
use dialogic_core::coder::{code_lesson_observed, Backend, FeedbackItem, SessionPolicy};
use dialogic_core::evaluation::{evaluate_run, MatchMode, MetricsReport};
use dialogic_core::experiment::{
    refinement_cycle, BackendSpec, ExperimentDefinition, ExperimentInputs, ExperimentOutcome,
    LineageEntry, RefineOptions,
};
use dialogic_core::prompt::{compile_instructions, InstructionConfig, InstructionDocument};
use dialogic_core::store::{LogEvent, RunRecord, Store, StoreError};
use dialogic_core::transcript::{CodeSet, GoldAnnotationSet, Lesson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{ChatConfig, ChatHttpBackend, CHAT_BACKEND_ID};

#[derive(Debug, Error)]
pub enum OpError {
    #[error("unknown {what} {id:?}")]
    NotFound { what: &'static str, id: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{message}")]
    Conflict { code: &'static str, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl OpError {
    /// Machine-readable error code used in API responses.
    pub fn code(&self) -> &'static str {
        match self {
            OpError::NotFound { what, .. } => match *what {
                "lesson" => "unknown_lesson",
                "run" => "unknown_run",
                "config" => "unknown_config",
                "turn" => "unknown_turn",
                _ => "not_found",
            },
            OpError::Invalid(_) => "validation",
            OpError::Conflict { code, .. } => code,
            OpError::Runtime(_) => "runtime",
        }
    }

    /// Process exit status: 2 for backend and runtime failures, 1 for
    /// everything the caller can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            OpError::Runtime(_) => 2,
            _ => 1,
        }
    }

    fn not_complete(run_id: &str) -> Self {
        OpError::Conflict {
            code: "run_not_complete",
            message: format!("run {run_id} is not complete"),
        }
    }
}

impl From<StoreError> for OpError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownConfig(id) => OpError::NotFound { what: "config", id },
            StoreError::UnknownLesson(id) => OpError::NotFound { what: "lesson", id },
            StoreError::UnknownRun(id) => OpError::NotFound { what: "run", id },
            StoreError::LessonConflict(_) => OpError::Conflict {
                code: "lesson_conflict",
                message: e.to_string(),
            },
            StoreError::RunExists(_) => OpError::Conflict {
                code: "run_exists",
                message: e.to_string(),
            },
            StoreError::InvalidId(_) => OpError::Invalid(e.to_string()),
            StoreError::Io { .. } | StoreError::Locked { .. } | StoreError::Corrupt { .. } => {
                OpError::Runtime(e.to_string())
            }
        }
    }
}

/// Builds a backend by id. `chat-http` needs connection settings.
pub fn make_backend(
    id: &str,
    codebook: &Codebook,
    chat: Option<&ChatConfig>,
) -> Result<Box<dyn Backend>, OpError> {
    match id {
        MOCK_BACKEND_ID => KeywordBackend::for_codebook(codebook)
            .map(|b| Box::new(b) as Box<dyn Backend>)
            .map_err(|e| OpError::Invalid(e.to_string())),
        CHAT_BACKEND_ID => {
            let chat = chat.ok_or_else(|| {
                OpError::Invalid("backend chat-http needs an endpoint and a model".into())
            })?;
            ChatHttpBackend::new(chat.clone())
                .map(|b| Box::new(b) as Box<dyn Backend>)
                .map_err(OpError::Invalid)
        }
        other => Err(OpError::Invalid(format!(
            "unknown backend {other:?}; expected {MOCK_BACKEND_ID} or {CHAT_BACKEND_ID}"
        ))),
    }
}

pub fn backend_from_spec(spec: &BackendSpec, codebook: &Codebook) -> Result<Box<dyn Backend>, OpError> {
    match spec {
        BackendSpec::MockKeyword => make_backend(MOCK_BACKEND_ID, codebook, None),
        BackendSpec::ChatHttp {
            endpoint,
            model,
            credential_env,
        } => make_backend(
            CHAT_BACKEND_ID,
            codebook,
            Some(&ChatConfig {
                endpoint: endpoint.clone(),
                model: model.clone(),
                credential_env: credential_env.clone(),
            }),
        ),
    }
}

/// A run whose inputs are checked and whose directory exists, ready to
/// execute.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub run_id: String,
    pub lesson: Lesson,
    pub config: InstructionConfig,
    pub document: InstructionDocument,
    pub policy: SessionPolicy,
}

pub fn prepare_run(
    store: &Store,
    lesson_id: &str,
    config_hash: &str,
    policy: SessionPolicy,
    run_id: Option<String>,
) -> Result<PreparedRun, OpError> {
    if policy.batch_size == 0 {
        return Err(OpError::Invalid("batch size must be at least 1".into()));
    }
    let lesson = store.load_lesson(lesson_id)?;
    if lesson.turns.is_empty() {
        return Err(OpError::Invalid(format!("lesson {lesson_id:?} has no turns")));
    }
    let config = store.load_config(config_hash)?;
    let document = compile_instructions(&config).map_err(|e| OpError::Invalid(e.to_string()))?;
    let run_id = run_id.unwrap_or_else(Store::new_run_id);
    store.create_run(&run_id)?;
    store.append_event(
        &run_id,
        LogEvent::ConfigSaved {
            config_hash: config_hash.to_string(),
        },
    )?;
    Ok(PreparedRun {
        run_id,
        lesson,
        config,
        document,
        policy,
    })
}

/// Codes the lesson, appending every event to the run's log as it happens.
pub fn execute_run(
    store: &Store,
    prepared: &PreparedRun,
    backend: &dyn Backend,
) -> Result<RunRecord, OpError> {
    let mut write_error = None;
    code_lesson_observed(
        &prepared.run_id,
        &prepared.lesson,
        &prepared.document,
        &prepared.config.codebook,
        backend,
        &prepared.policy,
        &mut |event| {
            if write_error.is_none() {
                if let Err(e) = store.append_event(&prepared.run_id, event.clone().into()) {
                    write_error = Some(e);
                }
            }
        },
    )
    .map_err(|e| OpError::Invalid(e.to_string()))?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    Ok(store.load_run(&prepared.run_id)?)
}

fn complete_run(store: &Store, run_id: &str) -> Result<RunRecord, OpError> {
    let record = store.load_run(run_id)?;
    if !record.run.is_complete() {
        return Err(OpError::not_complete(run_id));
    }
    Ok(record)
}

/// Gold for the run's lesson, checked against the run's codebook.
pub fn stored_gold(store: &Store, record: &RunRecord) -> Result<Option<GoldAnnotationSet>, OpError> {
    let config = store.load_config(&record.run.config_hash)?;
    Ok(store.load_gold(&record.run.lesson_id, &config.codebook)?)
}

/// Evaluates a complete run and saves `metrics.json`. Without an explicit
/// gold set the lesson's stored gold is used.
pub fn evaluate(
    store: &Store,
    run_id: &str,
    gold: Option<GoldAnnotationSet>,
    mode: MatchMode,
) -> Result<MetricsReport, OpError> {
    let record = complete_run(store, run_id)?;
    let config = store.load_config(&record.run.config_hash)?;
    let gold = match gold {
        Some(g) => g,
        None => stored_gold(store, &record)?.ok_or_else(|| {
            OpError::Invalid(format!("lesson {:?} has no gold labels", record.run.lesson_id))
        })?,
    };
    let report = evaluate_run(&gold, &record.run, &config.codebook, mode)
        .map_err(|e| OpError::Invalid(e.to_string()))?;
    store.write_metrics(run_id, &report)?;
    Ok(report)
}

/// Records a human correction for one coded turn. Labels may be aliases.
pub fn adjudicate(
    store: &Store,
    run_id: &str,
    turn_id: u32,
    codes: &[String],
    note: &str,
) -> Result<FeedbackItem, OpError> {
    let record = complete_run(store, run_id)?;
    let config = store.load_config(&record.run.config_hash)?;
    let coding = record.run.coding(turn_id).ok_or(OpError::NotFound {
        what: "turn",
        id: turn_id.to_string(),
    })?;
    let mut adjudicated = CodeSet::new();
    for label in codes.iter().map(|c| c.trim()).filter(|c| !c.is_empty()) {
        let code = config
            .codebook
            .resolve(label)
            .map_err(|e| OpError::Invalid(format!("turn {turn_id}: {e}")))?;
        adjudicated.insert(code.id.clone());
    }
    let item = FeedbackItem {
        turn_id,
        agent_codes: coding.predicted.clone(),
        adjudicated_codes: adjudicated,
        note: note.to_string(),
    };
    item.validate(&config)
        .map_err(|e| OpError::Invalid(e.to_string()))?;
    store.append_event(run_id, LogEvent::Adjudication(item.clone()))?;
    Ok(item)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompiledFeedback {
    pub new_config_hash: String,
    pub old_config_hash: String,
    pub cycle: usize,
    pub added_examples: usize,
}

/// Compiles the run's pending adjudications into a new config, saves it
/// and records the lineage step.
pub fn compile_feedback(
    store: &Store,
    run_id: &str,
    allow_agreements: bool,
) -> Result<CompiledFeedback, OpError> {
    let record = complete_run(store, run_id)?;
    let pending = record.pending_feedback();
    if pending.is_empty() {
        return Err(OpError::Invalid(format!("run {run_id} has no pending adjudications")));
    }
    let lesson = store.load_lesson(&record.run.lesson_id)?;
    let gold = stored_gold(store, &record)?.ok_or_else(|| {
        OpError::Invalid(format!("lesson {:?} has no gold labels", record.run.lesson_id))
    })?;
    let config = store.load_config(record.current_config_hash())?;
    let options = RefineOptions {
        cycle: record.lineage.len(),
        allow_agreements,
    };
    let refinement = refinement_cycle(&record.run, &gold, &pending, &config, &lesson, options)
        .map_err(|e| OpError::Invalid(e.to_string()))?;
    let new_hash = store.save_config(&refinement.config)?;
    let entry: LineageEntry = refinement.entry;
    let out = CompiledFeedback {
        new_config_hash: new_hash,
        old_config_hash: entry.old_config_hash.clone(),
        cycle: entry.cycle,
        added_examples: entry.added_examples.len(),
    };
    store.append_event(run_id, LogEvent::FeedbackCompiled(entry))?;
    Ok(out)
}

/// One row of the review table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub turn_id: u32,
    pub speaker: String,
    pub text: String,
    pub gold_codes: Option<CodeSet>,
    pub predicted_codes: Option<CodeSet>,
    pub justification: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjudicated_codes: Option<CodeSet>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjudication_note: Option<String>,
}

pub fn results(store: &Store, run_id: &str) -> Result<Vec<ResultRow>, OpError> {
    let record = store.load_run(run_id)?;
    if record.run.lesson_id.is_empty() {
        return Ok(Vec::new());
    }
    let lesson = store.load_lesson(&record.run.lesson_id)?;
    let gold = stored_gold(store, &record)?;
    Ok(lesson
        .turns
        .iter()
        .map(|turn| {
            let coding = record.run.coding(turn.turn_id);
            let adjudication = record.adjudications.get(&turn.turn_id);
            ResultRow {
                turn_id: turn.turn_id,
                speaker: turn.speaker.clone(),
                text: turn.text.clone(),
                gold_codes: gold.as_ref().and_then(|g| g.codes(turn.turn_id).cloned()),
                predicted_codes: coding.map(|c| c.predicted.clone()),
                justification: coding.map(|c| c.justification.clone()),
                adjudicated_codes: adjudication.map(|a| a.adjudicated_codes.clone()),
                adjudication_note: adjudication
                    .filter(|a| !a.note.is_empty())
                    .map(|a| a.note.clone()),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition_id: String,
    pub run_id: String,
    pub config_hash: String,
    pub example_count: usize,
    pub example_turns: usize,
    pub token_estimate: usize,
    pub turn_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub definition: ExperimentDefinition,
    pub conditions: Vec<ConditionSummary>,
    pub table: dialogic_core::experiment::ComparisonTable,
}

/// Persists an experiment's configs, runs and summary. Each condition's run
/// id ends with its condition id.
pub fn persist_experiment(
    store: &Store,
    def: &ExperimentDefinition,
    inputs: &ExperimentInputs,
    outcome: &ExperimentOutcome,
) -> Result<ExperimentRecord, OpError> {
    store.import_lesson(&inputs.test_lesson, Some(&inputs.test_gold))?;
    let stamp = Store::new_run_id();
    let mut conditions = Vec::new();
    for c in &outcome.conditions {
        let config_hash = store.save_config(&c.config)?;
        let run_id = format!("{stamp}-{}", c.condition_id);
        store.create_run(&run_id)?;
        store.append_event(
            &run_id,
            LogEvent::ConfigSaved {
                config_hash: config_hash.clone(),
            },
        )?;
        for event in &c.events {
            let mut event = event.clone();
            if let dialogic_core::coder::RunEvent::RunStarted(s) = &mut event {
                s.run_id = run_id.clone();
            }
            store.append_event(&run_id, event.into())?;
        }
        store.write_metrics(&run_id, &c.report)?;
        conditions.push(ConditionSummary {
            condition_id: c.condition_id.clone(),
            run_id,
            config_hash,
            example_count: c.config.examples.len(),
            example_turns: c.config.examples.turn_count(),
            token_estimate: c.document.token_estimate,
            turn_precision: c.report.turn_precision,
        });
    }
    let record = ExperimentRecord {
        definition: def.clone(),
        conditions,
        table: outcome.table.clone(),
    };
    store.save_experiment(&def.experiment_id, &record)?;
    Ok(record)
}
