//! Ready-made instruction configs for the built-in CDAS codebook.

use super::examples::{ExampleItem, ExampleKind, ExampleSet};
use super::tree::{Action, Branch, DecisionTree, Step};
use super::{InstructionConfig, PriorityRule, DEFAULT_TOKEN_BUDGET};
use crate::codebook::builtin_cdas;
use crate::transcript::{CodeSet, Turn};

pub const CDAS_ROLE_PREAMBLE: &str = "You code classroom dialogue with the CDAS scheme. \
For every turn you receive, give all codes that apply, reading each utterance in the context \
of the surrounding talk: a code records what the speaker means to do, not just the words used.";

fn codes(ids: &[&str]) -> CodeSet {
    ids.iter().map(|s| s.to_string()).collect()
}

fn assign(ids: &[&str]) -> Action {
    Action::Assign(codes(ids))
}

/// Four-step tree: a learning-goal gate, then invitations, contributions
/// and references.
pub fn cdas_decision_tree() -> DecisionTree {
    DecisionTree {
        steps: vec![
            Step::new(
                1,
                "Check relevance to the learning goal",
                vec![
                    Branch::new("the turn has nothing to do with the learning goal", Action::Uncoded),
                    Branch::new("the utterance is relevant", Action::Goto(2)),
                ],
            )
            .with_notes(&[
                "Greetings, classroom management and off-topic chat are Uncoded.",
                "\"Good morning everyone.\" -> UC",
            ]),
            Step::new(
                2,
                "Invitations",
                vec![
                    Branch::new("it asks others to build on or clarify an earlier contribution", assign(&["ELI"])),
                    Branch::new("it asks for reasons, explanation or prediction", assign(&["IRE"])),
                    Branch::new("it asks to compare or reconcile ideas", assign(&["IC"])),
                    Branch::new("it is any other verbal invitation or question", assign(&["OI"])),
                    Branch::new("it invites nothing", Action::Continue),
                ],
            )
            .with_notes(&["ELI needs a link to an earlier utterance; without one use OI."]),
            Step::new(
                3,
                "Contributions",
                vec![
                    Branch::new("it explicitly agrees or accepts", assign(&["A"])),
                    Branch::new("it challenges or disagrees", assign(&["Q"])),
                    Branch::new("it compares ideas and gives reasons", assign(&["RC"])),
                    Branch::new("it compares or summarises ideas without reasons", assign(&["SC"])),
                    Branch::new("it gives reasons or evidence", assign(&["RE"])),
                    Branch::new("it adds to an earlier idea", assign(&["EL"])),
                    Branch::new("none of these", Action::Continue),
                ],
            ),
            Step::new(
                4,
                "References",
                vec![
                    Branch::new("it refers back to earlier lessons or shared experience", assign(&["RB"])),
                    Branch::new("it links to the world outside the lesson", assign(&["RW"])),
                    Branch::new("nothing applies", Action::Uncoded),
                ],
            ),
        ],
    }
}

/// The CDAS baseline config with no anchor examples.
pub fn cdas_config() -> InstructionConfig {
    InstructionConfig {
        role_preamble: CDAS_ROLE_PREAMBLE.to_string(),
        global_rules: vec![
            PriorityRule::new(100, "Code every turn you are given, in order, and skip none."),
            PriorityRule::new(90, "A turn may hold several utterances; give it every code that applies."),
            PriorityRule::new(80, "Use UC only when no other code applies, and never alongside another code."),
            PriorityRule::new(50, "Judge each turn by the flow of the dialogue, not by keywords alone."),
        ],
        codebook: builtin_cdas(),
        decision_tree: cdas_decision_tree(),
        justification_rules: vec![
            "Never give an invitation code (ELI, IRE, IC, OI) to a rhetorical question or a gesture.".into(),
            "Quote the words that justify each code.".into(),
        ],
        stability_rules: vec![
            "An earlier similar turn was coded [X]. Is this coding consistent with it?".into(),
            "Before answering, compare with how earlier similar turns in this session were coded.".into(),
        ],
        examples: ExampleSet::default(),
        token_budget: DEFAULT_TOKEN_BUDGET,
    }
}

fn ex(kind: ExampleKind, id: u32, speaker: &str, text: &str, ids: &[&str]) -> ExampleItem {
    ExampleItem::single(kind, Turn::new(id, speaker, text), codes(ids))
}

/// Hand-written anchor examples that satisfy the default quota: one core
/// item per substantive code plus one, 7 ambiguous, 5 multi-utterance and 5
/// edge cases.
pub fn cdas_anchor_examples() -> ExampleSet {
    use ExampleKind::*;
    let items = vec![
        ex(Core, 1, "Teacher", "Can you add to what Sam just said?", &["ELI"]),
        ex(Core, 2, "Student", "And it also has four right angles.", &["EL"]),
        ex(Core, 3, "Teacher", "Why do you think the ice melted first?", &["IRE"]),
        ex(Core, 4, "Student", "It sank because the clay is denser than water.", &["RE"]),
        ex(Core, 5, "Teacher", "How is Amir's idea different from Jo's?", &["IC"]),
        ex(Core, 6, "Student", "We both said the answer was twelve.", &["SC"]),
        ex(Core, 7, "Student", "Mine is like Jo's but better, because it works for odd numbers too.", &["RC"]),
        ex(Core, 8, "Student", "Yes, I agree with that.", &["A"]),
        ex(Core, 9, "Student", "Are you sure? I don't think that adds up.", &["Q"]),
        ex(Core, 10, "Teacher", "Remember the circuit we built last week?", &["RB"]),
        ex(Core, 11, "Student", "My dad uses ratios like this when he mixes paint.", &["RW"]),
        ex(Core, 12, "Teacher", "What is seven times eight?", &["OI"]),
        ex(Core, 13, "Student", "It floats so it must be lighter than the water.", &["RE"]),
        ex(Ambiguous, 14, "Teacher", "Right.", &["A"]),
        ex(Ambiguous, 15, "Teacher", "What does everyone else think?", &["ELI"]),
        ex(Ambiguous, 16, "Student", "It could be the wind.", &["RE"]),
        ex(Ambiguous, 17, "Teacher", "Is that the same as what Lily found?", &["IC"]),
        ex(Ambiguous, 18, "Student", "Seventy-two.", &["UC"]),
        ex(Ambiguous, 19, "Teacher", "So the heavier one fell faster?", &["ELI"]),
        ex(Ambiguous, 20, "Student", "But that only works for even numbers.", &["Q"]),
        ex(MultiUtterance, 21, "Teacher", "Yes, well done. Now why does that happen?", &["A", "IRE"]),
        ex(MultiUtterance, 22, "Student", "I agree with Kai. It works because both sides match.", &["A", "RE"]),
        ex(MultiUtterance, 23, "Teacher", "Good. And last lesson we saw the same thing. Mia?", &["A", "RB", "OI"]),
        ex(MultiUtterance, 24, "Student", "No, that's wrong. It would tip over if it were taller.", &["Q", "RE"]),
        ex(MultiUtterance, 25, "Teacher", "Exactly, and it adds up to ten. What comes next?", &["A", "EL", "OI"]),
        ex(Edge, 26, "Teacher", "Good morning everyone.", &["UC"]),
        ex(Edge, 27, "Teacher", "Put your pens down and look this way.", &["UC"]),
        ex(Edge, 28, "Teacher", "Can you open the window please?", &["UC"]),
        ex(Edge, 29, "Student", "Um.", &["UC"]),
        ex(Edge, 30, "Teacher", "Off you go then.", &["UC"]),
    ];
    ExampleSet { items }
}

/// [`cdas_config`] with [`cdas_anchor_examples`].
pub fn cdas_config_with_anchors() -> InstructionConfig {
    cdas_config().with_examples(cdas_anchor_examples())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{compile_instructions, validate_decision_tree, validate_example_quota};

    #[test]
    fn tree_is_valid_without_warnings() {
        let report = validate_decision_tree(&cdas_decision_tree(), &builtin_cdas());
        assert!(report.is_valid(), "{report}");
        assert!(report.warnings.is_empty(), "{report}");
    }

    #[test]
    fn anchors_meet_quota_and_budget() {
        let report = validate_example_quota(&cdas_anchor_examples(), &builtin_cdas());
        assert!(report.passes(), "{:?}", report.violations);
        let doc = compile_instructions(&cdas_config_with_anchors()).unwrap();
        assert!(doc.token_estimate < DEFAULT_TOKEN_BUDGET);
    }
}
