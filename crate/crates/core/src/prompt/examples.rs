//! Anchor examples: corpus sampling and quota checks.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::Codebook;
use crate::transcript::{CodeSet, GoldAnnotationSet, Lesson, Turn};

/// Default contiguous window length for contextual sampling.
pub const DEFAULT_WINDOW: usize = 6;

pub const CORE_MIN: usize = 10;
pub const CORE_MAX: usize = 15;
pub const AMBIGUOUS_MIN: usize = 5;
pub const AMBIGUOUS_MAX: usize = 10;
pub const MULTI_UTTERANCE_MIN: usize = 5;
pub const EDGE_MIN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Core,
    Ambiguous,
    MultiUtterance,
    Edge,
}

/// Where an example came from. Adjudicated examples render in their own
/// block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleSource {
    #[default]
    Curated,
    Adjudicated,
}

impl ExampleSource {
    fn is_curated(&self) -> bool {
        *self == ExampleSource::Curated
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleItem {
    pub kind: ExampleKind,
    #[serde(default)]
    pub context_turns: Vec<Turn>,
    /// Gold codes of each context turn, parallel to `context_turns`; empty
    /// when the context is shown uncoded.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context_codes: Vec<CodeSet>,
    pub focus_turn: Turn,
    pub gold_codes: CodeSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "ExampleSource::is_curated")]
    pub source: ExampleSource,
}

impl ExampleItem {
    pub fn single(kind: ExampleKind, focus_turn: Turn, gold_codes: CodeSet) -> Self {
        ExampleItem {
            kind,
            context_turns: Vec::new(),
            context_codes: Vec::new(),
            focus_turn,
            gold_codes,
            rationale: None,
            source: ExampleSource::Curated,
        }
    }

    pub fn with_rationale(mut self, rationale: impl Into<String>) -> Self {
        self.rationale = Some(rationale.into());
        self
    }

    /// Number of dialogue turns the example shows.
    pub fn turn_count(&self) -> usize {
        self.context_turns.len() + 1
    }

    /// True for mixed-code items or focus turns with several utterances.
    pub fn is_multi_utterance(&self) -> bool {
        self.gold_codes.len() >= 2 || utterance_count(&self.focus_turn.text) >= 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExampleSet {
    #[serde(default)]
    pub items: Vec<ExampleItem>,
}

impl ExampleSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn count(&self, kind: ExampleKind) -> usize {
        self.items.iter().filter(|i| i.kind == kind).count()
    }

    /// Total dialogue turns across all items.
    pub fn turn_count(&self) -> usize {
        self.items.iter().map(ExampleItem::turn_count).sum()
    }
}

/// Sentence-level segments: runs of text ended by `.`, `?` or `!`
/// followed by whitespace or end of text.
pub fn utterance_count(text: &str) -> usize {
    let mut count = 0;
    let mut pending = false;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if matches!(c, '.' | '?' | '!') {
            while matches!(chars.peek(), Some('.' | '?' | '!')) {
                chars.next();
            }
            if pending && chars.peek().is_none_or(|n| n.is_whitespace()) {
                count += 1;
                pending = false;
            }
        } else if c.is_alphanumeric() {
            pending = true;
        }
    }
    count + usize::from(pending)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionMode {
    /// `k` isolated focus turns per substantive code.
    PerCodeIsolated { k: usize },
    /// Contiguous dialogue windows totalling `total_n` turns.
    ContextualFlow {
        total_n: usize,
        #[serde(default = "default_window")]
        window: usize,
    },
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleSelectionSpec {
    #[serde(flatten)]
    pub mode: SelectionMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectionError {
    #[error("code {code} has {available} corpus instances, {needed} requested")]
    InsufficientInstances {
        code: String,
        needed: usize,
        available: usize,
    },
    #[error("requested {requested} example turns but the corpus has {available}")]
    CorpusTooSmall { requested: usize, available: usize },
    #[error("need {needed} windows but only {available} fit in the corpus")]
    InsufficientWindows { needed: usize, available: usize },
    #[error("selection count and window must be positive")]
    ZeroCount,
    #[error("no gold annotations for corpus lesson {lesson_id:?}")]
    MissingGold { lesson_id: String },
    #[error("gold for lesson {lesson_id:?} lacks turn {turn_id}")]
    MissingTurnGold { lesson_id: String, turn_id: u32 },
}

struct GoldLesson<'a> {
    lesson: &'a Lesson,
    labels: Vec<&'a CodeSet>,
}

fn pair_gold<'a>(
    corpus: &'a [Lesson],
    gold: &'a [GoldAnnotationSet],
) -> Result<Vec<GoldLesson<'a>>, SelectionError> {
    let by_id: HashMap<&str, &GoldAnnotationSet> =
        gold.iter().map(|g| (g.lesson_id.as_str(), g)).collect();
    corpus
        .iter()
        .map(|lesson| {
            let g = by_id
                .get(lesson.lesson_id.as_str())
                .ok_or_else(|| SelectionError::MissingGold {
                    lesson_id: lesson.lesson_id.clone(),
                })?;
            let labels = lesson
                .turns
                .iter()
                .map(|t| {
                    g.labels
                        .get(&t.turn_id)
                        .ok_or_else(|| SelectionError::MissingTurnGold {
                            lesson_id: lesson.lesson_id.clone(),
                            turn_id: t.turn_id,
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(GoldLesson { lesson, labels })
        })
        .collect()
}

/// Samples anchor examples from a gold-annotated corpus. Deterministic for a
/// fixed `spec.seed`.
pub fn select_examples(
    corpus: &[Lesson],
    gold: &[GoldAnnotationSet],
    spec: &ExampleSelectionSpec,
    codebook: &Codebook,
) -> Result<ExampleSet, SelectionError> {
    let annotated = pair_gold(corpus, gold)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.mode {
        SelectionMode::PerCodeIsolated { k } => per_code_isolated(&annotated, k, codebook, &mut rng),
        SelectionMode::ContextualFlow { total_n, window } => {
            contextual_flow(&annotated, total_n, window, codebook, &mut rng)
        }
    }
}

fn per_code_isolated(
    corpus: &[GoldLesson<'_>],
    k: usize,
    codebook: &Codebook,
    rng: &mut ChaCha8Rng,
) -> Result<ExampleSet, SelectionError> {
    if k == 0 {
        return Err(SelectionError::ZeroCount);
    }
    let mut items = Vec::new();
    for code in codebook.substantive() {
        let candidates: Vec<(&Turn, &CodeSet)> = corpus
            .iter()
            .flat_map(|gl| gl.lesson.turns.iter().zip(gl.labels.iter().copied()))
            .filter(|(_, codes)| codes.contains(&code.id))
            .collect();
        if candidates.len() < k {
            return Err(SelectionError::InsufficientInstances {
                code: code.id.clone(),
                needed: k,
                available: candidates.len(),
            });
        }
        let mut picked = index::sample(rng, candidates.len(), k).into_vec();
        picked.sort_unstable();
        items.extend(picked.into_iter().map(|i| {
            let (turn, codes) = candidates[i];
            ExampleItem::single(ExampleKind::Core, turn.clone(), codes.clone())
        }));
    }
    Ok(ExampleSet { items })
}

fn contextual_flow(
    corpus: &[GoldLesson<'_>],
    total_n: usize,
    window: usize,
    codebook: &Codebook,
    rng: &mut ChaCha8Rng,
) -> Result<ExampleSet, SelectionError> {
    if total_n == 0 || window == 0 {
        return Err(SelectionError::ZeroCount);
    }
    let available: usize = corpus.iter().map(|gl| gl.lesson.turns.len()).sum();
    if total_n > available {
        return Err(SelectionError::CorpusTooSmall {
            requested: total_n,
            available,
        });
    }
    // Aligned, non-overlapping tiles of exactly `window` turns.
    let mut tiles: Vec<(usize, usize)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(li, gl)| {
            (0..gl.lesson.turns.len() / window).map(move |t| (li, t * window))
        })
        .collect();
    let needed = total_n.div_ceil(window);
    if tiles.len() < needed {
        return Err(SelectionError::InsufficientWindows {
            needed,
            available: tiles.len(),
        });
    }
    tiles.shuffle(rng);

    let substantive: Vec<&str> = codebook.substantive().map(|c| c.id.as_str()).collect();
    let mut covered: BTreeMap<&str, bool> = substantive.iter().map(|c| (*c, false)).collect();
    let mut chosen = Vec::with_capacity(needed);
    for _ in 0..needed {
        // Greedy coverage; ties go to the earliest tile in shuffled order,
        // so once every code is covered the choice is the seeded shuffle.
        let (best, _) = tiles
            .iter()
            .enumerate()
            .map(|(pos, &(li, start))| {
                let gain = substantive
                    .iter()
                    .filter(|c| !covered[**c])
                    .filter(|c| {
                        corpus[li].labels[start..start + window]
                            .iter()
                            .any(|codes| codes.contains(**c))
                    })
                    .count();
                (pos, gain)
            })
            .fold((0, 0), |acc, (pos, gain)| if gain > acc.1 { (pos, gain) } else { acc });
        let (li, start) = tiles.remove(best);
        for codes in &corpus[li].labels[start..start + window] {
            for code in codes.iter() {
                if let Some(flag) = covered.get_mut(code.as_str()) {
                    *flag = true;
                }
            }
        }
        chosen.push((li, start));
    }
    chosen.sort_unstable();

    let last_len = total_n - (needed - 1) * window;
    let items = chosen
        .iter()
        .enumerate()
        .map(|(i, &(li, start))| {
            let len = if i + 1 == needed { last_len } else { window };
            let gl = &corpus[li];
            let turns = &gl.lesson.turns[start..start + len];
            let codes = &gl.labels[start..start + len];
            ExampleItem {
                kind: ExampleKind::Core,
                context_turns: turns[..len - 1].to_vec(),
                context_codes: codes[..len - 1].iter().map(|c| (*c).clone()).collect(),
                focus_turn: turns[len - 1].clone(),
                gold_codes: codes[len - 1].clone(),
                rationale: None,
                source: ExampleSource::Curated,
            }
        })
        .collect();
    Ok(ExampleSet { items })
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuotaViolation {
    #[error("{found} core examples, at least {min} required")]
    CoreBelowMinimum { found: usize, min: usize },
    #[error("{found} core examples, at most {max} recommended")]
    CoreAboveMaximum { found: usize, max: usize },
    #[error("no core example covers code {code}")]
    CodeWithoutCoreExample { code: String },
    #[error("{found} ambiguous examples, at least {min} required")]
    AmbiguousBelowMinimum { found: usize, min: usize },
    #[error("{found} ambiguous examples, at most {max} recommended")]
    AmbiguousAboveMaximum { found: usize, max: usize },
    #[error("{found} multi-utterance examples, at least {min} required")]
    MultiUtteranceBelowMinimum { found: usize, min: usize },
    #[error("example {item} is tagged multi-utterance but has one code and one utterance")]
    NotMultiUtterance { item: usize },
    #[error("{found} edge-case examples, at least {min} required")]
    EdgeBelowMinimum { found: usize, min: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuotaReport {
    pub violations: Vec<QuotaViolation>,
}

impl QuotaReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the recommended mix of anchor examples: 10-15 core items covering
/// every substantive code, 5-10 ambiguous, at least 5 multi-utterance and at
/// least 5 edge cases.
pub fn validate_example_quota(examples: &ExampleSet, codebook: &Codebook) -> QuotaReport {
    let mut violations = Vec::new();

    let core = examples.count(ExampleKind::Core);
    if core < CORE_MIN {
        violations.push(QuotaViolation::CoreBelowMinimum {
            found: core,
            min: CORE_MIN,
        });
    } else if core > CORE_MAX {
        violations.push(QuotaViolation::CoreAboveMaximum {
            found: core,
            max: CORE_MAX,
        });
    }
    for code in codebook.substantive() {
        let covered = examples
            .items
            .iter()
            .any(|i| i.kind == ExampleKind::Core && i.gold_codes.contains(&code.id));
        if !covered {
            violations.push(QuotaViolation::CodeWithoutCoreExample {
                code: code.id.clone(),
            });
        }
    }

    let ambiguous = examples.count(ExampleKind::Ambiguous);
    if ambiguous < AMBIGUOUS_MIN {
        violations.push(QuotaViolation::AmbiguousBelowMinimum {
            found: ambiguous,
            min: AMBIGUOUS_MIN,
        });
    } else if ambiguous > AMBIGUOUS_MAX {
        violations.push(QuotaViolation::AmbiguousAboveMaximum {
            found: ambiguous,
            max: AMBIGUOUS_MAX,
        });
    }

    let mut multi = 0;
    for (i, item) in examples.items.iter().enumerate() {
        if item.kind != ExampleKind::MultiUtterance {
            continue;
        }
        if item.is_multi_utterance() {
            multi += 1;
        } else {
            violations.push(QuotaViolation::NotMultiUtterance { item: i + 1 });
        }
    }
    if multi < MULTI_UTTERANCE_MIN {
        violations.push(QuotaViolation::MultiUtteranceBelowMinimum {
            found: multi,
            min: MULTI_UTTERANCE_MIN,
        });
    }

    let edge = examples.count(ExampleKind::Edge);
    if edge < EDGE_MIN {
        violations.push(QuotaViolation::EdgeBelowMinimum {
            found: edge,
            min: EDGE_MIN,
        });
    }
    QuotaReport { violations }
}
