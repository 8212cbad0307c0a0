//! File-backed persistence for configs, lessons, runs and experiments.
//!
//! Layout under the data directory:
//!
//! ```text
//! configs/<config_hash>.json
//! lessons/<lesson_id>.tsv
//! lessons/<lesson_id>.gold.tsv
//! runs/<run_id>/events.ndjson
//! runs/<run_id>/report.json
//! runs/<run_id>/metrics.json
//! experiments/<experiment_id>.json
//! .lock
//! ```
//!
//! A run's `events.ndjson` is the source of truth. `report.json` is
//! rewritten after every append as the fold of the log, minus the run id.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::Codebook;
use crate::coder::{
    BatchExchange, BatchParsed, CodingRun, FeedbackItem, RunEvent, RunFailure, RunStarted,
};
use crate::evaluation::MetricsReport;
use crate::experiment::{Lineage, LineageEntry};
use crate::prompt::InstructionConfig;
use crate::transcript::{
    parse_gold_with, parse_transcript, GoldAnnotationSet, GoldCompleteness, Lesson,
};

pub const EVENTS_FILE: &str = "events.ndjson";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const LOCK_FILE: &str = ".lock";

/// Everything that can appear in a run's event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum LogEvent {
    ConfigSaved { config_hash: String },
    RunStarted(RunStarted),
    BatchSent(BatchExchange),
    BatchParsed(BatchParsed),
    RunCompleted,
    RunFailed(RunFailure),
    Adjudication(FeedbackItem),
    FeedbackCompiled(LineageEntry),
}

impl From<RunEvent> for LogEvent {
    fn from(e: RunEvent) -> Self {
        match e {
            RunEvent::RunStarted(s) => LogEvent::RunStarted(s),
            RunEvent::BatchSent(x) => LogEvent::BatchSent(x),
            RunEvent::BatchParsed(p) => LogEvent::BatchParsed(p),
            RunEvent::RunCompleted => LogEvent::RunCompleted,
            RunEvent::RunFailed(f) => LogEvent::RunFailed(f),
        }
    }
}

impl LogEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            LogEvent::ConfigSaved { .. } => "config_saved",
            LogEvent::RunStarted(_) => "run_started",
            LogEvent::BatchSent(_) => "batch_sent",
            LogEvent::BatchParsed(_) => "batch_parsed",
            LogEvent::RunCompleted => "run_completed",
            LogEvent::RunFailed(_) => "run_failed",
            LogEvent::Adjudication(_) => "adjudication",
            LogEvent::FeedbackCompiled(_) => "feedback_compiled",
        }
    }

    /// The coding-run part of this event, if any.
    pub fn as_run_event(&self) -> Option<RunEvent> {
        Some(match self {
            LogEvent::RunStarted(s) => RunEvent::RunStarted(s.clone()),
            LogEvent::BatchSent(x) => RunEvent::BatchSent(x.clone()),
            LogEvent::BatchParsed(p) => RunEvent::BatchParsed(p.clone()),
            LogEvent::RunCompleted => RunEvent::RunCompleted,
            LogEvent::RunFailed(f) => RunEvent::RunFailed(f.clone()),
            _ => return None,
        })
    }
}

/// One NDJSON line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub timestamp: DateTime<Utc>,
    #[serde(flatten)]
    pub event: LogEvent,
}

/// Fold of a run's log: the coding run plus its review history.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: CodingRun,
    #[serde(default)]
    pub configs: Vec<String>,
    /// Latest adjudication per turn.
    #[serde(default)]
    pub adjudications: BTreeMap<u32, FeedbackItem>,
    /// Adjudicated turns not yet compiled into a config.
    #[serde(default)]
    pub pending: BTreeSet<u32>,
    #[serde(default)]
    pub lineage: Lineage,
}

impl RunRecord {
    pub fn apply(&mut self, event: &LogEvent) {
        if let Some(e) = event.as_run_event() {
            self.run.apply(&e);
            return;
        }
        match event {
            LogEvent::ConfigSaved { config_hash } => self.configs.push(config_hash.clone()),
            LogEvent::Adjudication(item) => {
                self.pending.insert(item.turn_id);
                self.adjudications.insert(item.turn_id, item.clone());
            }
            LogEvent::FeedbackCompiled(entry) => {
                for item in &entry.feedback {
                    self.pending.remove(&item.turn_id);
                }
                self.lineage.entries.push(entry.clone());
            }
            _ => unreachable!("run events handled above"),
        }
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a LogEvent>) -> Self {
        let mut record = RunRecord::default();
        for e in events {
            record.apply(e);
        }
        record
    }

    pub fn pending_feedback(&self) -> Vec<FeedbackItem> {
        self.pending
            .iter()
            .filter_map(|t| self.adjudications.get(t).cloned())
            .collect()
    }

    /// The config the next refinement starts from: the lineage head, or
    /// the run's own config.
    pub fn current_config_hash(&self) -> &str {
        self.lineage.head().unwrap_or(&self.run.config_hash)
    }
}

/// The `report.json` rendering of a record. The run id is left out, so two
/// runs of the same inputs produce the same bytes.
pub fn render_report(record: &RunRecord) -> String {
    let mut value = serde_json::to_value(record).expect("run record serializes");
    if let Some(run) = value.get_mut("run").and_then(|r| r.as_object_mut()) {
        run.remove("run_id");
    }
    let mut text = serde_json::to_string_pretty(&value).expect("value serializes");
    text.push('\n');
    text
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LogRead {
    pub records: Vec<LogRecord>,
    /// Set when a truncated final line was dropped.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("line {line}: timestamp does not increase")]
    NotOrdered { line: usize },
}

/// Parses an event log. A final line without its newline that fails to
/// parse is treated as an interrupted write and dropped; any other bad line
/// is an error.
pub fn parse_log(text: &str) -> Result<LogRead, LogError> {
    let mut read = LogRead::default();
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        let last = i + 1 == lines.len();
        match serde_json::from_str::<LogRecord>(line) {
            Ok(record) => {
                if let Some(prev) = read.records.last() {
                    if record.timestamp <= prev.timestamp {
                        return Err(LogError::NotOrdered { line: i + 1 });
                    }
                }
                read.records.push(record);
            }
            Err(e) if last && !complete => {
                read.warning = Some(format!(
                    "dropped truncated final line {} ({} bytes): {e}",
                    i + 1,
                    line.len()
                ));
            }
            Err(e) => {
                return Err(LogError::Corrupt {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(read)
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("data directory {path} is locked by process {pid}")]
    Locked { path: PathBuf, pid: u32 },
    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unknown config {0}")]
    UnknownConfig(String),
    #[error("unknown lesson {0:?}")]
    UnknownLesson(String),
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("lesson {0:?} already exists with different content")]
    LessonConflict(String),
    #[error("run {0:?} already exists")]
    RunExists(String),
    #[error("invalid id {0:?}")]
    InvalidId(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl ToString) -> StoreError {
    StoreError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Ids become file names, so they are restricted to a safe alphabet.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn check_id(id: &str) -> Result<(), StoreError> {
    if valid_id(id) {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

/// Writes via a temporary file and rename so readers never see a partial
/// file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String, StoreError> {
    fs::read_to_string(path).map_err(io_err(path))
}

#[derive(Debug)]
struct LockFile {
    path: PathBuf,
}

impl LockFile {
    fn acquire(dir: &Path) -> Result<Self, StoreError> {
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id()).map_err(io_err(&path))?;
                    return Ok(LockFile { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let owner = fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    if let Some(pid) = owner {
                        if Path::new(&format!("/proc/{pid}")).exists() {
                            return Err(StoreError::Locked { path, pid });
                        }
                    }
                    log::warn!("removing stale lock {}", path.display());
                    fs::remove_file(&path).map_err(io_err(&path))?;
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        Err(corrupt(&path, "lock file keeps reappearing"))
    }
}

impl Drop for LockFile {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LessonSummary {
    pub lesson_id: String,
    pub subject: String,
    pub turn_count: usize,
    pub has_gold: bool,
}

#[derive(Debug, Default)]
struct RunWriter {
    last: Option<DateTime<Utc>>,
    record: RunRecord,
    position: usize,
}

/// An open data directory. Holds the directory lock until dropped.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    writers: Mutex<HashMap<String, Arc<Mutex<RunWriter>>>>,
    warnings: Vec<String>,
    _lock: LockFile,
}

impl Store {
    /// Opens (creating if needed) a data directory, takes its lock and
    /// checks every stored file.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["configs", "lessons", "runs", "experiments"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let lock = LockFile::acquire(&root)?;
        let mut store = Store {
            root,
            writers: Mutex::new(HashMap::new()),
            warnings: Vec::new(),
            _lock: lock,
        };
        store.warnings = store.verify()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Recoveries made while opening, such as dropped partial lines.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn verify(&self) -> Result<Vec<String>, StoreError> {
        let mut warnings = Vec::new();
        for hash in self.config_hashes()? {
            self.load_config(&hash)?;
        }
        self.lessons()?;
        for run_id in self.runs()? {
            let path = self.events_path(&run_id);
            if !path.exists() {
                return Err(corrupt(&path, "missing event log"));
            }
            let read = parse_log(&read_text(&path)?).map_err(|e| corrupt(&path, e))?;
            if let Some(w) = read.warning {
                log::warn!("{}: {w}", path.display());
                warnings.push(format!("{}: {w}", path.display()));
            }
        }
        Ok(warnings)
    }

    fn list(&self, sub: &str, suffix: &str) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join(sub);
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(stem) = name.strip_suffix(suffix) {
                if !stem.is_empty() && !stem.contains('.') {
                    out.push(stem.to_string());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    // configs

    fn config_path(&self, hash: &str) -> PathBuf {
        self.root.join("configs").join(format!("{hash}.json"))
    }

    pub fn config_hashes(&self) -> Result<Vec<String>, StoreError> {
        self.list("configs", ".json")
    }

    /// Stores a config under its hash. Saving the same config twice is a
    /// no-op.
    pub fn save_config(&self, config: &InstructionConfig) -> Result<String, StoreError> {
        let hash = config.config_hash();
        let path = self.config_path(&hash);
        if !path.exists() {
            let mut text = serde_json::to_string_pretty(config).expect("config serializes");
            text.push('\n');
            write_atomic(&path, text.as_bytes())?;
        }
        Ok(hash)
    }

    pub fn load_config(&self, hash: &str) -> Result<InstructionConfig, StoreError> {
        check_id(hash).map_err(|_| StoreError::UnknownConfig(hash.to_string()))?;
        let path = self.config_path(hash);
        if !path.exists() {
            return Err(StoreError::UnknownConfig(hash.to_string()));
        }
        let config: InstructionConfig =
            serde_json::from_str(&read_text(&path)?).map_err(|e| corrupt(&path, e))?;
        let actual = config.config_hash();
        if actual != hash {
            return Err(corrupt(&path, format!("content hashes to {actual}")));
        }
        Ok(config)
    }

    // lessons

    fn lesson_path(&self, id: &str) -> PathBuf {
        self.root.join("lessons").join(format!("{id}.tsv"))
    }

    fn gold_path(&self, id: &str) -> PathBuf {
        self.root.join("lessons").join(format!("{id}.gold.tsv"))
    }

    /// Adds a lesson and optional gold labels. Stored lessons are never
    /// rewritten: importing identical content again is accepted, anything
    /// else is a conflict.
    pub fn import_lesson(
        &self,
        lesson: &Lesson,
        gold: Option<&GoldAnnotationSet>,
    ) -> Result<(), StoreError> {
        check_id(&lesson.lesson_id)?;
        let id = &lesson.lesson_id;
        let mut files = vec![(self.lesson_path(id), lesson.to_document())];
        if let Some(g) = gold {
            files.push((self.gold_path(id), g.to_document()));
        }
        for (path, text) in &files {
            if path.exists() && read_text(path)? != *text {
                return Err(StoreError::LessonConflict(id.clone()));
            }
        }
        for (path, text) in files {
            if !path.exists() {
                write_atomic(&path, text.as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn lessons(&self) -> Result<Vec<LessonSummary>, StoreError> {
        self.list("lessons", ".tsv")?
            .into_iter()
            .map(|id| {
                let lesson = self.load_lesson(&id)?;
                Ok(LessonSummary {
                    has_gold: self.gold_path(&id).exists(),
                    lesson_id: lesson.lesson_id,
                    subject: lesson.subject,
                    turn_count: lesson.turns.len(),
                })
            })
            .collect()
    }

    pub fn load_lesson(&self, id: &str) -> Result<Lesson, StoreError> {
        check_id(id).map_err(|_| StoreError::UnknownLesson(id.to_string()))?;
        let path = self.lesson_path(id);
        if !path.exists() {
            return Err(StoreError::UnknownLesson(id.to_string()));
        }
        let lesson = parse_transcript(&read_text(&path)?).map_err(|e| corrupt(&path, e))?;
        if lesson.lesson_id != id {
            return Err(corrupt(&path, format!("holds lesson {:?}", lesson.lesson_id)));
        }
        Ok(lesson)
    }

    /// Gold labels for a lesson, if any were imported.
    pub fn load_gold(
        &self,
        id: &str,
        codebook: &Codebook,
    ) -> Result<Option<GoldAnnotationSet>, StoreError> {
        let lesson = self.load_lesson(id)?;
        let path = self.gold_path(id);
        if !path.exists() {
            return Ok(None);
        }
        parse_gold_with(&read_text(&path)?, &lesson, codebook, GoldCompleteness::Strict)
            .map(Some)
            .map_err(|e| corrupt(&path, e))
    }

    // runs

    fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    fn events_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join(EVENTS_FILE)
    }

    pub fn runs(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("runs");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if entry.path().is_dir() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    /// A fresh id: UTC time to the millisecond plus a random suffix.
    pub fn new_run_id() -> String {
        format!(
            "{}-{:06x}",
            Utc::now().format("%Y%m%dT%H%M%S%3fZ"),
            rand::random::<u32>() & 0xff_ffff
        )
    }

    pub fn create_run(&self, run_id: &str) -> Result<(), StoreError> {
        check_id(run_id)?;
        let dir = self.run_dir(run_id);
        if dir.exists() {
            return Err(StoreError::RunExists(run_id.to_string()));
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let events = self.events_path(run_id);
        File::create(&events).map_err(io_err(&events))?;
        write_atomic(&dir.join(REPORT_FILE), render_report(&RunRecord::default()).as_bytes())
    }

    fn writer(&self, run_id: &str) -> Result<Arc<Mutex<RunWriter>>, StoreError> {
        let mut writers = self.writers.lock().expect("writer map poisoned");
        if let Some(w) = writers.get(run_id) {
            return Ok(w.clone());
        }
        let read = self.read_log(run_id)?;
        if read.warning.is_some() {
            // Cut the interrupted line so new appends start on a clean line.
            let path = self.events_path(run_id);
            let text = read_text(&path)?;
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            let file = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
            file.set_len(keep as u64).map_err(io_err(&path))?;
        }
        let record = RunRecord::replay(read.records.iter().map(|r| &r.event));
        let writer = Arc::new(Mutex::new(RunWriter {
            last: read.records.last().map(|r| r.timestamp),
            position: read.records.len(),
            record,
        }));
        writers.insert(run_id.to_string(), writer.clone());
        Ok(writer)
    }

    /// Appends one event and refreshes `report.json`. Returns the event's
    /// 0-based position in the log. Appends to one run are serialized.
    pub fn append_event(&self, run_id: &str, event: LogEvent) -> Result<usize, StoreError> {
        let writer = self.writer(run_id)?;
        let mut w = writer.lock().expect("run writer poisoned");
        let now = Utc::now();
        let timestamp = match w.last {
            Some(last) if now <= last => last + Duration::microseconds(1),
            _ => now,
        };
        let record = LogRecord { timestamp, event };
        let mut line = serde_json::to_string(&record).expect("event serializes");
        line.push('\n');
        let path = self.events_path(run_id);
        let mut file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))?;
        w.record.apply(&record.event);
        w.last = Some(timestamp);
        let position = w.position;
        w.position += 1;
        write_atomic(
            &self.run_dir(run_id).join(REPORT_FILE),
            render_report(&w.record).as_bytes(),
        )?;
        Ok(position)
    }

    pub fn read_log(&self, run_id: &str) -> Result<LogRead, StoreError> {
        check_id(run_id).map_err(|_| StoreError::UnknownRun(run_id.to_string()))?;
        let path = self.events_path(run_id);
        if !path.exists() {
            return Err(StoreError::UnknownRun(run_id.to_string()));
        }
        parse_log(&read_text(&path)?).map_err(|e| corrupt(&path, e))
    }

    /// The run's state, rebuilt from its event log.
    pub fn load_run(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        let read = self.read_log(run_id)?;
        Ok(RunRecord::replay(read.records.iter().map(|r| &r.event)))
    }

    pub fn read_report(&self, run_id: &str) -> Result<String, StoreError> {
        check_id(run_id).map_err(|_| StoreError::UnknownRun(run_id.to_string()))?;
        let path = self.run_dir(run_id).join(REPORT_FILE);
        if !path.exists() {
            return Err(StoreError::UnknownRun(run_id.to_string()));
        }
        read_text(&path)
    }

    pub fn write_metrics(&self, run_id: &str, report: &MetricsReport) -> Result<(), StoreError> {
        check_id(run_id)?;
        let dir = self.run_dir(run_id);
        if !dir.exists() {
            return Err(StoreError::UnknownRun(run_id.to_string()));
        }
        let mut text = serde_json::to_string_pretty(report).expect("report serializes");
        text.push('\n');
        write_atomic(&dir.join(METRICS_FILE), text.as_bytes())
    }

    // experiments

    pub fn save_experiment<T: Serialize>(&self, experiment_id: &str, value: &T) -> Result<PathBuf, StoreError> {
        check_id(experiment_id)?;
        let path = self.root.join("experiments").join(format!("{experiment_id}.json"));
        let mut text = serde_json::to_string_pretty(value).expect("experiment serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
