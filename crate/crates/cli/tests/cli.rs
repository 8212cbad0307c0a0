use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dialogic_core::prompt::presets::cdas_config;
use dialogic_core::store::{parse_log, render_report, RunRecord};
use dialogic_core::synthetic::synthetic_lesson;

const BIN: &str = env!("CARGO_BIN_EXE_dialogic");

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(turns: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (lesson, gold) = synthetic_lesson("lesson-a", turns, 21);
        let mut doc = String::from("# lesson_id: lesson-a\n# subject: synthetic\n");
        doc.push_str(&lesson.to_document());
        fs::write(dir.path().join("lesson.tsv"), doc).unwrap();
        fs::write(dir.path().join("gold.tsv"), gold.to_document()).unwrap();
        let config = serde_json::to_string_pretty(&cdas_config()).unwrap();
        fs::write(dir.path().join("config.json"), config).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, data: &str, args: &[&str]) -> Output {
        Command::new(BIN)
            .current_dir(self.dir.path())
            .env_remove("DIALOGIC_DATA")
            .env_remove("CODER_BACKEND_KEY")
            .arg("--data")
            .arg(data)
            .args(args)
            .output()
            .unwrap()
    }

    fn code(&self, data: &str) -> String {
        let out = self.run(
            data,
            &["code", "--lesson", "lesson.tsv", "--gold", "gold.tsv", "--config", "config.json", "--backend", "mock-keyword"],
        );
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap().lines().next().unwrap().to_string()
    }
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn report(dir: &Path, data: &str, run_id: &str) -> Vec<u8> {
    fs::read(dir.join(data).join("runs").join(run_id).join("report.json")).unwrap()
}

#[test]
fn code_twice_gives_identical_reports() {
    let fx = Fixture::new(65);
    let a = fx.code("data-a");
    let b = fx.code("data-b");
    assert_ne!(a, b);
    assert_eq!(report(fx.dir.path(), "data-a", &a), report(fx.dir.path(), "data-b", &b));

    let ea = fx.run("data-a", &["eval", "--run", &a, "--gold", "gold.tsv", "--format", "json"]);
    let eb = fx.run("data-b", &["eval", "--run", &b, "--gold", "gold.tsv", "--format", "json"]);
    assert_eq!(ea.status.code(), Some(0));
    assert_eq!(stdout(&ea), stdout(&eb));
    let metrics = fs::read_to_string(fx.path("data-a").join("runs").join(&a).join("metrics.json")).unwrap();
    assert_eq!(metrics, stdout(&ea));
}

#[test]
fn stored_report_is_the_fold_of_the_log() {
    let fx = Fixture::new(45);
    let id = fx.code("data");
    let run_dir = fx.path("data").join("runs").join(&id);
    let log = parse_log(&fs::read_to_string(run_dir.join("events.ndjson")).unwrap()).unwrap();
    assert!(log.warning.is_none());
    let kinds: Vec<&str> = log.records.iter().map(|r| r.event.kind()).collect();
    assert_eq!(kinds[..2], ["config_saved", "run_started"]);
    assert_eq!(kinds.last(), Some(&"run_completed"));
    let record = RunRecord::replay(log.records.iter().map(|r| &r.event));
    assert_eq!(record.run.run_id, id);
    assert_eq!(render_report(&record), fs::read_to_string(run_dir.join("report.json")).unwrap());
}

#[test]
fn eval_formats() {
    let fx = Fixture::new(45);
    let id = fx.code("data");
    let table = fx.run("data", &["eval", "--run", &id, "--gold", "gold.tsv", "--format", "table"]);
    let text = stdout(&table);
    assert!(text.starts_with("Categories"), "{text}");
    assert_eq!(text.lines().filter(|l| !l.is_empty()).count(), 15);
    assert!(text.contains("Turn precision (exact)"));
    let csv = fx.run("data", &["eval", "--run", &id, "--mode", "overlap", "--format", "csv"]);
    let text = stdout(&csv);
    assert_eq!(text.lines().next(), Some("code,precision,recall,accuracy,f1"));
    assert_eq!(text.lines().count(), 14);
}

#[test]
fn validation_errors_exit_one() {
    let fx = Fixture::new(10);
    let zero = fx.run(
        "data",
        &["code", "--lesson", "lesson.tsv", "--config", "config.json", "--backend", "mock-keyword", "--batch-size", "0"],
    );
    assert_eq!(zero.status.code(), Some(1));
    assert_eq!(fx.run("data", &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fx.run("data", &["eval", "--bogus"]).status.code(), Some(1));
    let unknown = fx.run("data", &["code", "--lesson", "lesson.tsv", "--config", "config.json", "--backend", "oracle"]);
    assert_eq!(unknown.status.code(), Some(1));
    let missing = fx.run("data", &["eval", "--run", "nope"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
    assert_eq!(fx.run("data", &["--help"]).status.code(), Some(0));
}

#[test]
fn backend_failure_exits_two() {
    let fx = Fixture::new(10);
    let out = Command::new(BIN)
        .current_dir(fx.dir.path())
        .env("CODER_BACKEND_KEY", "k")
        .args(["--data", "data", "code", "--lesson", "lesson.tsv", "--config", "config.json"])
        .args(["--backend", "chat-http", "--endpoint", "http://127.0.0.1:9/v1/chat", "--model", "m"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let id = stdout(&out).lines().next().unwrap().to_string();
    let report = fs::read_to_string(fx.path("data").join("runs").join(id).join("report.json")).unwrap();
    assert!(report.contains("\"failed\""));
}

#[test]
fn adjudicate_and_feedback() {
    let fx = Fixture::new(80);
    let id = fx.code("data");
    let record: serde_json::Value =
        serde_json::from_slice(&report(fx.dir.path(), "data", &id)).unwrap();
    let gold = fs::read_to_string(fx.path("gold.tsv")).unwrap();
    let gold_of = |turn: u64| -> String {
        gold.lines()
            .find_map(|l| l.strip_prefix(&format!("{turn}\t")))
            .unwrap()
            .to_string()
    };
    let codings = record["run"]["codings"].as_array().unwrap();
    let mut disagree = Vec::new();
    let mut agree = None;
    for c in codings {
        let turn = c["turn_id"].as_u64().unwrap();
        let predicted: Vec<&str> = c["predicted"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        if predicted.join(",") == gold_of(turn) {
            agree.get_or_insert(turn);
        } else {
            disagree.push(turn);
        }
    }
    let agree = agree.unwrap();
    let none = fx.run("data", &["feedback", "--run", &id]);
    assert_eq!(none.status.code(), Some(1));

    for turn in &disagree[..3] {
        let out = fx.run("data", &["adjudicate", "--run", &id, "--turn", &turn.to_string(), "--codes", &gold_of(*turn), "--note", "matches gold"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let bad = fx.run("data", &["adjudicate", "--run", &id, "--turn", "1", "--codes", "UC,A"]);
    assert_eq!(bad.status.code(), Some(1));
    let alias = fx.run("data", &["adjudicate", "--run", &id, "--turn", &disagree[3].to_string(), "--codes", "REI"]);
    assert!(stdout(&alias).contains("\"IRE\""));

    let out = fx.run("data", &["feedback", "--run", &id]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let new_hash = stdout(&out).trim().to_string();
    assert_ne!(new_hash, cdas_config().config_hash());
    let saved = fs::read_to_string(fx.path("data").join("configs").join(format!("{new_hash}.json"))).unwrap();
    let config: dialogic_core::prompt::InstructionConfig = serde_json::from_str(&saved).unwrap();
    assert_eq!(config.examples.len(), 4);

    // An agreement needs the override flag.
    fx.run("data", &["adjudicate", "--run", &id, "--turn", &agree.to_string(), "--codes", "EL"]);
    assert_eq!(fx.run("data", &["feedback", "--run", &id]).status.code(), Some(1));
    let forced = fx.run("data", &["feedback", "--run", &id, "--allow-agreements"]);
    assert_eq!(forced.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&report(fx.dir.path(), "data", &id)).unwrap();
    let lineage = report["lineage"]["entries"].as_array().unwrap();
    assert_eq!(lineage.len(), 2);
    assert_eq!(lineage[1]["old_config_hash"], lineage[0]["new_config_hash"]);
}

#[test]
fn compile_writes_document_and_sidecar() {
    let fx = Fixture::new(5);
    let out = fx.run("data", &["compile", "--config", "config.json", "--out", "doc.md"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out).trim(), cdas_config().config_hash());
    let doc = fs::read_to_string(fx.path("doc.md")).unwrap();
    assert!(doc.contains("## Decision tree"));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fx.path("doc.sections.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config_hash"], cdas_config().config_hash());
    let printed = fx.run("data", &["compile", "--config", "config.json"]);
    assert_eq!(stdout(&printed), doc);
}

#[test]
fn data_directory_is_locked() {
    let fx = Fixture::new(5);
    fs::create_dir_all(fx.path("data")).unwrap();
    // The test process is alive, so its pid holds the lock.
    fs::write(fx.path("data").join(".lock"), format!("{}\n", std::process::id())).unwrap();
    let out = fx.run("data", &["code", "--lesson", "lesson.tsv", "--config", "config.json", "--backend", "mock-keyword"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn experiment_definition_printing_and_validation() {
    let fx = Fixture::new(5);
    let out = fx.run("data", &["experiment", "--builtin", "--print-def"]);
    assert_eq!(out.status.code(), Some(0));
    let def: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(def["conditions"].as_array().unwrap().len(), 4);
    assert_eq!(def["backend"]["id"], "mock-keyword");
    fs::write(fx.path("bad.json"), "{\"experiment_id\": \"x\"}").unwrap();
    assert_eq!(fx.run("data", &["experiment", "--def", "bad.json"]).status.code(), Some(1));
    assert_eq!(fx.run("data", &["experiment"]).status.code(), Some(1));
}

#[test]
fn small_experiment_from_file() {
    let fx = Fixture::new(5);
    let mut def = dialogic_core::experiment::builtin_experiment();
    def.experiment_id = "tiny".into();
    def.example_corpus = dialogic_core::experiment::CorpusSource::Synthetic {
        prefix: "ex".into(),
        lessons: 3,
        turns_per_lesson: 150,
        seed: 8,
    };
    def.test_lesson = dialogic_core::experiment::LessonSource::Synthetic {
        lesson_id: "tiny-test".into(),
        turns: 60,
        seed: 2,
    };
    def.conditions[1].selection = dialogic_core::prompt::SelectionMode::PerCodeIsolated { k: 2 };
    def.conditions[2].selection = dialogic_core::prompt::SelectionMode::ContextualFlow { total_n: 30, window: 6 };
    def.conditions[3].selection = dialogic_core::prompt::SelectionMode::ContextualFlow { total_n: 60, window: 6 };
    fs::write(fx.path("tiny.json"), serde_json::to_string(&def).unwrap()).unwrap();
    let a = fx.run("data", &["experiment", "--def", "tiny.json"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
    let table: Vec<String> = stdout(&a).lines().take(15).map(String::from).collect();
    assert!(table[0].contains("condition-4"));
    let b = fx.run("data", &["experiment", "--def", "tiny.json"]);
    let again: Vec<String> = stdout(&b).lines().take(15).map(String::from).collect();
    assert_eq!(table, again);
    let saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fx.path("data/experiments/tiny.json")).unwrap()).unwrap();
    assert_eq!(saved["conditions"].as_array().unwrap().len(), 4);
    assert_eq!(fs::read_dir(fx.path("data/runs")).unwrap().count(), 8);
}
