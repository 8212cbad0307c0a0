//! Step/branch decision trees embedded in instructions.
//!
//! Steps are numbered `1..=n`. A branch either assigns codes, assigns
//! `UC`, jumps forward to a later step, or continues to the next step.
//! Forward-only jumps make every valid tree acyclic, so interpreting it
//! visits each step at most once.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Codebook, UNCODED};
use crate::transcript::CodeSet;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecisionTree {
    #[serde(default)]
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub number: u32,
    pub title: String,
    pub branches: Vec<Branch>,
    /// Free-text guidance rendered under the step (e.g. worked examples).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub condition: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Assign(CodeSet),
    Uncoded,
    Goto(u32),
    Continue,
}

impl Branch {
    pub fn new(condition: impl Into<String>, action: Action) -> Self {
        Branch {
            condition: condition.into(),
            action,
        }
    }
}

impl Step {
    pub fn new(number: u32, title: impl Into<String>, branches: Vec<Branch>) -> Self {
        Step {
            number,
            title: title.into(),
            branches,
            notes: Vec::new(),
        }
    }

    pub fn with_notes(mut self, notes: &[&str]) -> Self {
        self.notes = notes.iter().map(|n| n.to_string()).collect();
        self
    }
}

/// Problems that make a tree unusable. Step and branch numbers are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeViolation {
    #[error("step at position {position} is numbered {found}, expected {expected}")]
    StepNumbering {
        position: usize,
        expected: u32,
        found: u32,
    },
    #[error("step {step} has no branches")]
    EmptyStep { step: u32 },
    #[error("step {step} branch {branch}: goto {target} does not move forward")]
    BackwardGoto { step: u32, branch: usize, target: u32 },
    #[error("step {step} branch {branch}: goto {target} is past the last step")]
    GotoOutOfRange { step: u32, branch: usize, target: u32 },
    #[error("step {step} branch {branch}: unknown code {code:?}")]
    UnknownCode {
        step: u32,
        branch: usize,
        code: String,
    },
    #[error("step {step} branch {branch}: assigns no codes")]
    EmptyAssign { step: u32, branch: usize },
    #[error("step {step} branch {branch}: assigns {UNCODED} together with other codes")]
    AssignNotExclusive { step: u32, branch: usize },
    #[error("step {step} branch {branch}: last step cannot continue")]
    ContinueInLastStep { step: u32, branch: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeWarning {
    #[error("step {step} is unreachable from step 1")]
    UnreachableStep { step: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TreeReport {
    pub violations: Vec<TreeViolation>,
    pub warnings: Vec<TreeWarning>,
}

impl TreeReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn summary(&self) -> String {
        self.violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ")
    }
}

impl fmt::Display for TreeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "error: {v}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        Ok(())
    }
}

pub fn validate_decision_tree(tree: &DecisionTree, codebook: &Codebook) -> TreeReport {
    let mut report = TreeReport::default();
    let n = tree.steps.len() as u32;
    for (i, step) in tree.steps.iter().enumerate() {
        let expected = i as u32 + 1;
        if step.number != expected {
            report.violations.push(TreeViolation::StepNumbering {
                position: i + 1,
                expected,
                found: step.number,
            });
        }
        if step.branches.is_empty() {
            report
                .violations
                .push(TreeViolation::EmptyStep { step: step.number });
        }
        for (b, branch) in step.branches.iter().enumerate() {
            let branch_no = b + 1;
            match &branch.action {
                Action::Goto(target) if *target <= step.number => {
                    report.violations.push(TreeViolation::BackwardGoto {
                        step: step.number,
                        branch: branch_no,
                        target: *target,
                    })
                }
                Action::Goto(target) if *target > n => {
                    report.violations.push(TreeViolation::GotoOutOfRange {
                        step: step.number,
                        branch: branch_no,
                        target: *target,
                    })
                }
                Action::Assign(codes) => {
                    if codes.is_empty() {
                        report.violations.push(TreeViolation::EmptyAssign {
                            step: step.number,
                            branch: branch_no,
                        });
                    }
                    for code in codes.iter().filter(|c| !codebook.contains(c)) {
                        report.violations.push(TreeViolation::UnknownCode {
                            step: step.number,
                            branch: branch_no,
                            code: code.clone(),
                        });
                    }
                    if codes.contains(UNCODED) && codes.len() > 1 {
                        report.violations.push(TreeViolation::AssignNotExclusive {
                            step: step.number,
                            branch: branch_no,
                        });
                    }
                }
                Action::Continue if i + 1 == tree.steps.len() => {
                    report.violations.push(TreeViolation::ContinueInLastStep {
                        step: step.number,
                        branch: branch_no,
                    })
                }
                _ => {}
            }
        }
    }
    // Reachability only makes sense once numbering is sound.
    if report.violations.is_empty() && !tree.steps.is_empty() {
        let mut reachable = BTreeSet::from([1u32]);
        for step in &tree.steps {
            if !reachable.contains(&step.number) {
                continue;
            }
            for branch in &step.branches {
                match branch.action {
                    Action::Goto(t) => {
                        reachable.insert(t);
                    }
                    Action::Continue => {
                        reachable.insert(step.number + 1);
                    }
                    _ => {}
                }
            }
        }
        for step in &tree.steps {
            if !reachable.contains(&step.number) {
                report
                    .warnings
                    .push(TreeWarning::UnreachableStep { step: step.number });
            }
        }
    }
    report
}

/// Terminal result of walking a tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Assigned(CodeSet),
    Uncoded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Walk {
    pub visited: Vec<u32>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WalkError {
    #[error("tree has no steps")]
    Empty,
    #[error("step {step}: branch index {index} out of range")]
    NoSuchBranch { step: u32, index: usize },
    #[error("step {step}: jump to {target} is not a forward step")]
    BadJump { step: u32, target: u32 },
}

impl DecisionTree {
    /// Interprets the tree, asking `choose` which branch (0-based) applies
    /// at each visited step.
    pub fn walk<F>(&self, mut choose: F) -> Result<Walk, WalkError>
    where
        F: FnMut(&Step) -> usize,
    {
        if self.steps.is_empty() {
            return Err(WalkError::Empty);
        }
        let mut visited = Vec::new();
        let mut current = 1u32;
        loop {
            let step = &self.steps[current as usize - 1];
            visited.push(step.number);
            let index = choose(step);
            let branch = step.branches.get(index).ok_or(WalkError::NoSuchBranch {
                step: step.number,
                index,
            })?;
            let next = match &branch.action {
                Action::Assign(codes) => {
                    return Ok(Walk {
                        visited,
                        outcome: Outcome::Assigned(codes.clone()),
                    })
                }
                Action::Uncoded => {
                    return Ok(Walk {
                        visited,
                        outcome: Outcome::Uncoded,
                    })
                }
                Action::Goto(target) => *target,
                Action::Continue => current + 1,
            };
            if next <= current || next as usize > self.steps.len() {
                return Err(WalkError::BadJump {
                    step: current,
                    target: next,
                });
            }
            current = next;
        }
    }
}
