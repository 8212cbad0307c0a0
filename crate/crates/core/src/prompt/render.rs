use std::fmt::Write;

use super::examples::{ExampleItem, ExampleKind, ExampleSource};
use super::tree::{Action, DecisionTree};
use super::{InstructionConfig, SectionKind, SectionSpan};
use crate::codebook::Codebook;
use crate::transcript::{CodeSet, Turn};

const NONE: &str = "(none)\n";

/// Renders every canonical section. Each span runs up to the start of the
/// next one, so the spans tile the text.
pub(super) fn render(config: &InstructionConfig) -> (String, Vec<SectionSpan>) {
    let mut text = String::new();
    let mut spans = Vec::with_capacity(SectionKind::CANONICAL.len());
    for (i, kind) in SectionKind::CANONICAL.into_iter().enumerate() {
        let start = text.len();
        if i > 0 {
            text.push('\n');
        }
        match kind {
            SectionKind::RolePreamble => {
                text.push_str(config.role_preamble.trim());
                text.push('\n');
            }
            SectionKind::GlobalRules => {
                text.push_str("## Global rules\n");
                let rules = config.ordered_rules();
                if rules.is_empty() {
                    text.push_str(NONE);
                }
                for (n, rule) in rules.iter().enumerate() {
                    let _ = writeln!(text, "{}. {}", n + 1, rule.text.trim());
                }
            }
            SectionKind::CodeDefinitions => {
                text.push_str("## Code definitions\n");
                render_codebook(&mut text, &config.codebook);
            }
            SectionKind::DecisionTree => {
                text.push_str("## Decision tree\n");
                render_tree(&mut text, &config.decision_tree);
            }
            SectionKind::JustificationRules => {
                text.push_str("## Justification rules\n");
                render_bullets(&mut text, &config.justification_rules);
            }
            SectionKind::StabilityControl => {
                text.push_str("## Stability control\n");
                render_bullets(&mut text, &config.stability_rules);
            }
            SectionKind::Examples => {
                text.push_str("## Examples\n");
                render_examples(&mut text, &config.examples.items);
            }
        }
        spans.push(SectionSpan {
            section: kind,
            start,
            end: text.len(),
        });
    }
    (text, spans)
}

fn render_bullets(text: &mut String, items: &[String]) {
    if items.is_empty() {
        text.push_str(NONE);
    }
    for item in items {
        let _ = writeln!(text, "- {}", item.trim());
    }
}

fn render_codebook(text: &mut String, codebook: &Codebook) {
    for (i, code) in codebook.codes().iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        let _ = writeln!(text, "### {} ({})", code.name, code.id);
        let _ = writeln!(text, "{}", code.definition);
        if !code.keywords.is_empty() {
            let _ = writeln!(text, "Keywords: {}", code.keywords.join(", "));
        }
        if !code.exclusions.is_empty() {
            let _ = writeln!(text, "Exclusions: {}", code.exclusions);
        }
        if !code.aliases.is_empty() {
            let _ = writeln!(text, "Also labelled: {}", code.aliases.join(", "));
        }
    }
}

fn join_codes(codes: &CodeSet) -> String {
    codes.iter().map(String::as_str).collect::<Vec<_>>().join(", ")
}

fn render_tree(text: &mut String, tree: &DecisionTree) {
    if tree.steps.is_empty() {
        text.push_str(NONE);
    }
    for (i, step) in tree.steps.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        let _ = writeln!(text, "### Step {}: {}", step.number, step.title);
        for branch in &step.branches {
            let action = match &branch.action {
                Action::Assign(codes) => format!("code as {}", join_codes(codes)),
                Action::Uncoded => "code as Uncoded (UC)".to_string(),
                Action::Goto(target) => format!("go to step {target}"),
                Action::Continue => format!("continue to step {}", step.number + 1),
            };
            let _ = writeln!(text, "- If {} -> {}", branch.condition.trim(), action);
        }
        for note in &step.notes {
            let _ = writeln!(text, "  - {}", note.trim());
        }
    }
}

fn turn_line(turn: &Turn) -> String {
    format!("Turn {} ({}): {}", turn.turn_id, turn.speaker, turn.text)
}

fn render_item(text: &mut String, n: usize, item: &ExampleItem) {
    let _ = writeln!(text, "Example {n}:");
    for (i, turn) in item.context_turns.iter().enumerate() {
        match item.context_codes.get(i) {
            Some(codes) => {
                let _ = writeln!(text, "  {} [{}]", turn_line(turn), join_codes(codes));
            }
            None => {
                let _ = writeln!(text, "  {}", turn_line(turn));
            }
        }
    }
    let _ = writeln!(text, "  {}", turn_line(&item.focus_turn));
    let _ = writeln!(text, "  Codes: {}", join_codes(&item.gold_codes));
    if let Some(rationale) = &item.rationale {
        let _ = writeln!(text, "  Why: {}", rationale.trim());
    }
}

fn kind_heading(kind: ExampleKind) -> &'static str {
    match kind {
        ExampleKind::Core => "### Core examples",
        ExampleKind::Ambiguous => "### Ambiguous examples",
        ExampleKind::MultiUtterance => "### Multi-utterance examples",
        ExampleKind::Edge => "### Edge cases",
    }
}

fn render_examples(text: &mut String, items: &[ExampleItem]) {
    if items.is_empty() {
        text.push_str(NONE);
        return;
    }
    let mut groups: Vec<(&'static str, Vec<&ExampleItem>)> = Vec::new();
    for kind in [
        ExampleKind::Core,
        ExampleKind::Ambiguous,
        ExampleKind::MultiUtterance,
        ExampleKind::Edge,
    ] {
        let group: Vec<_> = items
            .iter()
            .filter(|i| i.kind == kind && i.source == ExampleSource::Curated)
            .collect();
        groups.push((kind_heading(kind), group));
    }
    let adjudicated: Vec<_> = items
        .iter()
        .filter(|i| i.source == ExampleSource::Adjudicated)
        .collect();
    groups.push(("### Adjudicated examples", adjudicated));

    let mut n = 0;
    let mut first = true;
    for (heading, group) in groups.into_iter().filter(|(_, g)| !g.is_empty()) {
        if !first {
            text.push('\n');
        }
        first = false;
        let _ = writeln!(text, "{heading}");
        for item in group {
            n += 1;
            render_item(text, n, item);
        }
    }
}
