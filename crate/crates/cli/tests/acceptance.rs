//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use dialogic_cli::ops;
use dialogic_core::baseline::KeywordBackend;
use dialogic_core::codebook::builtin_cdas;
use dialogic_core::coder::{
    code_lesson, parse_agent_response, render_reference_response, Backend, BackendError, ChatMessage,
    CodingRun, ParseError, RunStatus, SessionPolicy, TurnCoding, REQUEST_INSTRUCTION,
};
use dialogic_core::evaluation::{build_confusion, evaluate_run, f1_from_pr, MatchMode};
use dialogic_core::experiment::{builtin_experiment, differs_only_in, run_experiment};
use dialogic_core::prompt::presets::{cdas_anchor_examples, cdas_config, cdas_config_with_anchors, cdas_decision_tree};
use dialogic_core::prompt::examples::{validate_example_quota, ExampleKind, QuotaViolation};
use dialogic_core::prompt::tree::{validate_decision_tree, Action, TreeViolation};
use dialogic_core::prompt::{compile_instructions, SectionKind};
use dialogic_core::store::{render_report, RunRecord, Store};
use dialogic_core::synthetic::synthetic_lesson;
use dialogic_core::transcript::{make_batches, Batch, CodeSet, GoldAnnotationSet, Turn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_dialogic");
const F1_TOLERANCE: f64 = 5e-4;
const CONFUSION_FIXTURES: usize = 500;

fn within(start: Instant, limit: Duration, what: &str) {
    let took = start.elapsed();
    assert!(took < limit, "{what} took {took:?}, limit {limit:?}");
}

fn mock() -> KeywordBackend {
    KeywordBackend::for_codebook(&builtin_cdas()).unwrap()
}

fn random_codes(rng: &mut ChaCha8Rng, ids: &[String]) -> CodeSet {
    let substantive: Vec<&String> = ids.iter().filter(|c| *c != "UC").collect();
    if rng.random_ratio(1, 8) {
        return ["UC".to_string()].into_iter().collect();
    }
    let n = rng.random_range(1..=4);
    (0..n)
        .map(|_| substantive[rng.random_range(0..substantive.len())].clone())
        .collect()
}

/// A complete run and gold set over `n` turns with the given predictions.
fn fixture(gold: &[CodeSet], predicted: &[CodeSet]) -> (GoldAnnotationSet, CodingRun) {
    let labels: BTreeMap<u32, CodeSet> = gold.iter().cloned().enumerate().map(|(i, g)| (i as u32 + 1, g)).collect();
    let codings = predicted
        .iter()
        .enumerate()
        .map(|(i, p)| TurnCoding {
            turn_id: i as u32 + 1,
            predicted: p.clone(),
            justification: String::new(),
            raw_span: 0..0,
        })
        .collect();
    let run = CodingRun {
        run_id: "r".into(),
        lesson_id: "l".into(),
        status: RunStatus::Complete,
        turn_count: gold.len(),
        codings,
        ..CodingRun::default()
    };
    (GoldAnnotationSet { lesson_id: "l".into(), labels }, run)
}

fn f1_consistency() {
    let start = Instant::now();
    let rows = [
        ("ELI", 0.5114, 0.3214, 0.3947),
        ("EL", 0.6095, 0.5664, 0.5872),
        ("IRE", 0.8077, 0.5153, 0.6292),
    ];
    for (code, p, r, expected) in rows {
        let f1 = f1_from_pr(p, r).unwrap();
        assert!((f1 - expected).abs() <= F1_TOLERANCE, "{code}: f1 {f1:.6} vs {expected}");
    }
    within(start, Duration::from_secs(1), "f1 check");
}

fn confusion_oracle() {
    let start = Instant::now();
    let ids: Vec<String> = builtin_cdas().ids().map(str::to_string).collect();
    assert_eq!(ids.len(), 13);
    let mask = |set: &CodeSet| -> u16 {
        set.iter()
            .map(|c| 1u16 << ids.iter().position(|x| x == c).unwrap())
            .fold(0, |a, b| a | b)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
    for fixture_no in 0..CONFUSION_FIXTURES {
        let n = rng.random_range(1..=80);
        let gold: Vec<CodeSet> = (0..n).map(|_| random_codes(&mut rng, &ids)).collect();
        let predicted: Vec<CodeSet> = (0..n).map(|_| random_codes(&mut rng, &ids)).collect();
        let (g, run) = fixture(&gold, &predicted);
        for (bit, id) in ids.iter().enumerate() {
            // Independent counter over bitmasks: [tp, fp, fn, tn].
            let mut expected = [0u64; 4];
            for (a, b) in gold.iter().zip(&predicted) {
                let in_gold = mask(a) >> bit & 1 == 1;
                let in_pred = mask(b) >> bit & 1 == 1;
                let slot = match (in_gold, in_pred) {
                    (true, true) => 0,
                    (false, true) => 1,
                    (true, false) => 2,
                    (false, false) => 3,
                };
                expected[slot] += 1;
            }
            let c = build_confusion(&g, &run, id).unwrap().counts;
            assert_eq!([c.tp, c.fp, c.fn_, c.tn], expected, "fixture {fixture_no}, code {id}");
            assert_eq!(c.tp + c.fp + c.fn_ + c.tn, n as u64);
        }
    }
    within(start, Duration::from_secs(5), "confusion oracle");
}

fn perfect_agreement() {
    let codebook = builtin_cdas();
    let ids: Vec<String> = codebook.ids().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let n = rng.random_range(1..=60);
        let gold: Vec<CodeSet> = (0..n).map(|_| random_codes(&mut rng, &ids)).collect();
        let (g, run) = fixture(&gold, &gold);
        for mode in [MatchMode::Exact, MatchMode::Overlap] {
            let report = evaluate_run(&g, &run, &codebook, mode).unwrap();
            assert_eq!(report.turn_precision, 1.0);
            for row in &report.per_code {
                for value in [row.precision, row.recall, row.accuracy, row.f1].into_iter().flatten() {
                    assert_eq!(value, 1.0, "{} in {mode:?}", row.code_id);
                }
                assert_eq!(row.accuracy, Some(1.0));
            }
        }
    }
}

fn prompt_determinism() {
    let start = Instant::now();
    for config in [cdas_config(), cdas_config_with_anchors()] {
        let a = compile_instructions(&config).unwrap();
        let b = compile_instructions(&config.clone()).unwrap();
        assert_eq!(a.text.as_bytes(), b.text.as_bytes());
        assert_eq!(a.config_hash, b.config_hash);
        assert_eq!(a.config_hash, config.config_hash());

        let mut last_rank = None;
        let mut last_end = 0;
        for span in &a.section_map {
            let rank = SectionKind::CANONICAL.iter().position(|k| *k == span.section).unwrap();
            assert!(last_rank.is_none_or(|r| rank > r), "{:?} out of order", span.section);
            assert!(span.start >= last_end && span.end > span.start, "{:?} overlaps", span.section);
            last_rank = Some(rank);
            last_end = span.end;
        }
        assert!(last_end <= a.text.len());

        let definitions = a.section(SectionKind::CodeDefinitions);
        for code in builtin_cdas().codes() {
            assert!(definitions.contains(&code.id), "{} missing", code.id);
            assert!(definitions.contains(&code.definition), "{} definition missing", code.id);
        }
    }
    within(start, Duration::from_secs(1), "prompt compilation");
}

fn tree_validation() {
    let codebook = builtin_cdas();
    let tree = cdas_decision_tree();
    let step1 = &tree.steps[0];
    assert_eq!(step1.title, "Check relevance to the learning goal");
    assert!(step1.branches.iter().any(|b| b.action == Action::Uncoded));
    assert!(step1.branches.iter().any(|b| matches!(b.action, Action::Goto(2) | Action::Continue)));
    let report = validate_decision_tree(&tree, &codebook);
    assert!(report.is_valid(), "{report}");
    assert!(report.warnings.is_empty(), "{report}");

    let mut backward = tree.clone();
    backward.steps[2].branches[6].action = Action::Goto(1);
    let report = validate_decision_tree(&backward, &codebook);
    assert_eq!(
        report.violations,
        [TreeViolation::BackwardGoto { step: 3, branch: 7, target: 1 }]
    );

    let mut unknown = tree;
    unknown.steps[3].branches[0].action = Action::Assign(["XY".to_string()].into_iter().collect());
    let report = validate_decision_tree(&unknown, &codebook);
    assert_eq!(
        report.violations,
        [TreeViolation::UnknownCode { step: 4, branch: 1, code: "XY".into() }]
    );
}

fn quota() {
    let codebook = builtin_cdas();
    let full = cdas_anchor_examples();
    let counts = [
        ExampleKind::Core,
        ExampleKind::Ambiguous,
        ExampleKind::MultiUtterance,
        ExampleKind::Edge,
    ]
    .map(|k| full.count(k));
    assert_eq!(counts, [13, 7, 5, 5]);
    assert!(validate_example_quota(&full, &codebook).passes());

    let mut nine_core = full.clone();
    let mut dropped = 0;
    nine_core.items.retain(|i| {
        let drop = i.kind == ExampleKind::Core && dropped < 4;
        dropped += drop as usize;
        !drop
    });
    assert_eq!(nine_core.count(ExampleKind::Core), 9);
    let report = validate_example_quota(&nine_core, &codebook);
    assert!(report
        .violations
        .contains(&QuotaViolation::CoreBelowMinimum { found: 9, min: 10 }));

    let mut no_multi = full;
    no_multi.items.retain(|i| i.kind != ExampleKind::MultiUtterance);
    let report = validate_example_quota(&no_multi, &codebook);
    assert_eq!(
        report.violations,
        [QuotaViolation::MultiUtteranceBelowMinimum { found: 0, min: 5 }]
    );
}

fn batching() {
    let (lesson, _) = synthetic_lesson("long", 1386, 3);
    let batches = make_batches(&lesson, 20).unwrap();
    assert_eq!(batches.len(), 70);
    let joined: Vec<Turn> = batches.iter().flat_map(|b| b.turns.iter().cloned()).collect();
    assert_eq!(joined, lesson.turns);

    let policy = SessionPolicy {
        reset_between_batches: true,
        ..SessionPolicy::default()
    };
    let doc = compile_instructions(&cdas_config()).unwrap();
    let run = code_lesson(&lesson, &doc, &builtin_cdas(), &mock(), &policy).unwrap();
    assert_eq!(run.status, RunStatus::Complete);
    assert_eq!(run.batch_count, 70);
    assert_eq!(run.codings.len(), 1386);
    // Batch sessions, in order, after any verification session.
    let batch_sessions: Vec<usize> = {
        let mut s: Vec<usize> = run
            .event_log
            .iter()
            .filter(|e| e.sent.content.contains(REQUEST_INSTRUCTION))
            .map(|e| e.session)
            .collect();
        s.dedup();
        s
    };
    assert_eq!(batch_sessions.len(), 70);
    for pair in batch_sessions.windows(2) {
        let next = run.session_transcript(pair[1]);
        for msg in run.session_transcript(pair[0]) {
            assert!(!next.contains(&msg), "session {} leaks into {}", pair[0], pair[1]);
        }
    }
}

fn parser_round_trip() {
    let codebook = builtin_cdas();
    let ids: Vec<String> = codebook.ids().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let words = ["why", "because", "yes", "Sam", "is", "it", "the", "same?", "no.", "and", "so", "tip"];
    for _ in 0..300 {
        let n = rng.random_range(1..=25);
        let mut turns = Vec::new();
        let mut codings = Vec::new();
        for i in 0..n {
            let turn_id = 5 + 2 * i as u32;
            let len = rng.random_range(1..=12);
            let text: Vec<&str> = (0..len).map(|_| words[rng.random_range(0..words.len())]).collect();
            let speaker = if i % 2 == 0 { "Teacher" } else { "Student" };
            turns.push(Turn::new(turn_id, speaker, text.join(" ")));
            let justification: Vec<&str> = (0..rng.random_range(1..6)).map(|_| words[rng.random_range(0..3)]).collect();
            codings.push(TurnCoding {
                turn_id,
                predicted: random_codes(&mut rng, &ids),
                justification: justification.join(" "),
                raw_span: 0..0,
            });
        }
        let text = render_reference_response(&turns, &codings);
        let batch = Batch { lesson_id: "l", ordinal: 1, turns: &turns };
        let parsed = parse_agent_response(&text, &batch, &codebook).unwrap();
        assert_eq!(parsed.codings.len(), codings.len());
        for (p, c) in parsed.codings.iter().zip(&codings) {
            assert_eq!((p.turn_id, &p.predicted, &p.justification), (c.turn_id, &c.predicted, &c.justification));
        }
    }

    let turns = [Turn::new(241, "Teacher", "Good, and the two halves make one whole. Noor?")];
    let batch = Batch { lesson_id: "l", ordinal: 1, turns: &turns };
    let block = "Turn 241 – Teacher\n\nTranscript:\n\"Good, and the two halves make one whole. Noor?\"\n\n\
Codes: A, EL, OI\nJustification: Agreement, elaboration and an open invitation.\n";
    let parsed = parse_agent_response(block, &batch, &codebook).unwrap();
    let expected: CodeSet = ["A", "EL", "OI"].map(String::from).into_iter().collect();
    assert_eq!(parsed.codings[0].predicted, expected);
    let err = parse_agent_response(&block.replace("A, EL, OI", "XY"), &batch, &codebook).unwrap_err();
    assert_eq!(err, ParseError::UnknownCode { turn_id: 241, label: "XY".into() });
    assert!(err.to_string().contains("241"), "{err}");
}

fn cli(dir: &Path, data: &str, args: &[&str]) -> String {
    let out = Command::new(BIN)
        .current_dir(dir)
        .env_remove("DIALOGIC_DATA")
        .arg("--data")
        .arg(data)
        .args(args)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn end_to_end_determinism(work: &Path) {
    let (lesson, gold) = synthetic_lesson("e2e", 240, 99);
    fs::write(work.join("lesson.tsv"), format!("# lesson_id: e2e\n{}", lesson.to_document())).unwrap();
    fs::write(work.join("gold.tsv"), gold.to_document()).unwrap();
    fs::write(work.join("config.json"), serde_json::to_string(&cdas_config_with_anchors()).unwrap()).unwrap();
    let mut outputs = Vec::new();
    for data in ["data-1", "data-2"] {
        let code = cli(
            work,
            data,
            &["code", "--lesson", "lesson.tsv", "--gold", "gold.tsv", "--config", "config.json", "--backend", "mock-keyword"],
        );
        let run_id = code.lines().next().unwrap().to_string();
        let eval = cli(work, data, &["eval", "--run", &run_id, "--format", "json"]);
        let dir = work.join(data).join("runs").join(&run_id);
        let report = fs::read(dir.join("report.json")).unwrap();
        let metrics = fs::read(dir.join("metrics.json")).unwrap();
        outputs.push((report, metrics, eval));
    }
    assert!(outputs[0].0 == outputs[1].0, "report.json differs between executions");
    assert!(outputs[0].1 == outputs[1].1, "metrics.json differs between executions");
    assert_eq!(outputs[0].2, outputs[1].2);

    let def = builtin_experiment();
    let inputs = def.load_inputs(work).unwrap();
    let first = run_experiment(&def, &inputs, &mock()).unwrap();
    let second = run_experiment(&def, &inputs, &mock()).unwrap();
    assert_eq!(first.table.conditions.len(), 4);
    assert_eq!(first.table.code_ids.len(), 13);
    assert!(first.table.precision.iter().all(|col| col.len() == 13));
    assert_eq!(first.table, second.table);
    assert_eq!(first.table.render_text(), second.table.render_text());
    assert_eq!(
        serde_json::to_string(&first.table).unwrap(),
        serde_json::to_string(&second.table).unwrap()
    );

    let docs: Vec<_> = first.conditions.iter().map(|c| &c.document).collect();
    for a in &docs {
        for b in &docs {
            assert!(differs_only_in(a, b, SectionKind::Examples));
            let span = |d: &dialogic_core::prompt::InstructionDocument| {
                d.section_map.iter().find(|s| s.section == SectionKind::Examples).unwrap().range()
            };
            let (ra, rb) = (span(a), span(b));
            assert_eq!(a.text[..ra.start], b.text[..rb.start]);
            assert_eq!(a.text[ra.end..], b.text[rb.end..]);
        }
    }
    assert_ne!(docs[0].text, docs[1].text, "conditions should differ in their examples");
}

/// Rejects the batch requests after the first `ok` of them.
struct Flaky {
    ok: usize,
    seen: AtomicUsize,
}

impl Backend for Flaky {
    fn id(&self) -> &str {
        "flaky"
    }
    fn deterministic(&self) -> bool {
        true
    }
    fn send(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let last = &messages.last().unwrap().content;
        if last.contains(REQUEST_INSTRUCTION) && self.seen.fetch_add(1, Ordering::SeqCst) >= self.ok {
            return Err(BackendError::Rejected("quota exhausted".into()));
        }
        mock().send(messages)
    }
}

fn event_sourcing(work: &Path) {
    let root = work.join("store");
    {
        let store = Store::open(&root).unwrap();
        let (lesson, gold) = synthetic_lesson("es", 90, 4);
        store.import_lesson(&lesson, Some(&gold)).unwrap();
        let hash = store.save_config(&cdas_config()).unwrap();
        let policies = [
            SessionPolicy::default(),
            SessionPolicy {
                stability_probe: true,
                batch_size: 7,
                ..SessionPolicy::default()
            },
        ];
        for (i, policy) in policies.into_iter().enumerate() {
            let prepared = ops::prepare_run(&store, "es", &hash, policy, Some(format!("run-{i}"))).unwrap();
            ops::execute_run(&store, &prepared, &mock()).unwrap();
        }
        let failing = ops::prepare_run(&store, "es", &hash, SessionPolicy::default(), Some("run-failed".into())).unwrap();
        let record = ops::execute_run(&store, &failing, &Flaky { ok: 2, seen: AtomicUsize::new(0) }).unwrap();
        assert_eq!(record.run.status, RunStatus::Failed);

        let results = ops::results(&store, "run-0").unwrap();
        let wrong: Vec<_> = results.iter().filter(|r| r.gold_codes != r.predicted_codes).take(3).collect();
        assert!(!wrong.is_empty());
        for row in wrong {
            let codes: Vec<String> = row.gold_codes.clone().unwrap().into_iter().collect();
            ops::adjudicate(&store, "run-0", row.turn_id, &codes, "reviewed").unwrap();
        }
        ops::compile_feedback(&store, "run-0", false).unwrap();
    }
    for dir in [root, work.join("data-1"), work.join("data-2")] {
        let store = Store::open(&dir).unwrap();
        let runs = store.runs().unwrap();
        assert!(!runs.is_empty());
        for run_id in runs {
            let log = store.read_log(&run_id).unwrap();
            assert!(log.warning.is_none());
            let record = RunRecord::replay(log.records.iter().map(|r| &r.event));
            let stored = store.read_report(&run_id).unwrap();
            assert_eq!(render_report(&record), stored, "{run_id}");
        }
    }
}

fn main() {
    panic::set_hook(Box::new(|_| {}));
    let work = tempfile::tempdir().unwrap();
    let work_path = work.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn Fn()>)> = vec![
        ("f1-consistency", Box::new(f1_consistency)),
        ("confusion-oracle", Box::new(confusion_oracle)),
        ("perfect-agreement", Box::new(perfect_agreement)),
        ("prompt-determinism", Box::new(prompt_determinism)),
        ("decision-tree-validation", Box::new(tree_validation)),
        ("example-quota", Box::new(quota)),
        ("batching", Box::new(batching)),
        ("parser-round-trip", Box::new(parser_round_trip)),
        ("end-to-end-determinism", Box::new({
            let w = work_path.clone();
            move || end_to_end_determinism(&w)
        })),
        ("event-sourcing-replay", Box::new({
            let w = work_path.clone();
            move || event_sourcing(&w)
        })),
    ];
    let mut failed = 0;
    let mut stdout = std::io::stdout().lock();
    for (name, check) in &criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let ms = start.elapsed().as_secs_f64() * 1000.0;
        match outcome {
            Ok(()) => writeln!(stdout, "PASS {name} ({ms:.0} ms)").unwrap(),
            Err(payload) => {
                failed += 1;
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                writeln!(stdout, "FAIL {name}: {}", msg.replace('\n', " ")).unwrap();
            }
        }
    }
    writeln!(stdout, "acceptance: {} passed, {failed} failed", criteria.len() - failed).unwrap();
    drop(stdout);
    drop(work);
    if failed > 0 {
        std::process::exit(1);
    }
}
