//! Seeded synthetic lessons with gold labels.
//!
//! The generator draws gold codes from a fixed distribution over the CDAS
//! ids and writes a short templated utterance for each. Texts sometimes
//! carry keyword cues and sometimes do not, so rule-based coders land well
//! short of perfect agreement. Useful for offline experiments and tests; the
//! texts make no claim to realism.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::UNCODED;
use crate::transcript::{CodeSet, GoldAnnotationSet, Lesson, Turn};

const WEIGHTS: &[(&str, u32)] = &[
    ("UC", 14),
    ("OI", 14),
    ("EL", 12),
    ("RE", 12),
    ("A", 10),
    ("ELI", 6),
    ("IRE", 6),
    ("Q", 5),
    ("RB", 5),
    ("RW", 4),
    ("SC", 4),
    ("RC", 4),
    ("IC", 4),
];

const NAMES: &[&str] = &["Maya", "Sam", "Jo", "Kai", "Lily", "Amir", "Noor", "Ben"];

fn templates(code: &str) -> &'static [&'static str] {
    match code {
        "ELI" => &[
            "Can you add to what {n} said?",
            "Who can build on that idea?",
            "Do you agree with {n}?",
            "What do you think about that, {n}?",
        ],
        "EL" => &[
            "And it also has a right angle.",
            "There is another one on the next page as well.",
            "The second part is the same length.",
            "It goes up by three each time.",
        ],
        "IRE" => &[
            "Why does it do that?",
            "What if we doubled it?",
            "How do you know it is bigger?",
            "Explain how you got there.",
        ],
        "RE" => &[
            "It is heavier because it is made of metal.",
            "So it has to be an even number.",
            "If it rains then the soil gets darker.",
            "It would fall over with a taller tower.",
            "The bigger one holds more water.",
        ],
        "IC" => &[
            "How is that different from {n}'s answer?",
            "Which is better, the table or the graph?",
            "Compare your method with {n}'s.",
        ],
        "SC" => &[
            "We both got twelve.",
            "That is the same as the first group.",
            "Both of our answers match.",
        ],
        "RC" => &[
            "Mine differs from {n}'s because it works for odd numbers.",
            "On the other hand the graph shows it better, because you see the trend.",
            "I partly agree, but because the scale changed it is not fair.",
        ],
        "A" => &[
            "Yes.",
            "I agree with {n}.",
            "Exactly, that's it.",
            "Right, well done.",
        ],
        "Q" => &[
            "Are you sure about that?",
            "I disagree, it cannot be that.",
            "That doesn't sound right to me.",
        ],
        "RB" => &[
            "Remember what we did last week?",
            "Like the experiment we did earlier.",
            "We saw this in the last lesson.",
        ],
        "RW" => &[
            "My mum uses this at the shop.",
            "You see this in real life on bridges.",
            "It was in the news yesterday.",
        ],
        "OI" => &[
            "What is seven times eight?",
            "{n}?",
            "Who has the answer for number four?",
            "Tell me the next step.",
        ],
        _ => &[
            "Morning, everyone.",
            "Pens down for a minute.",
            "Sit down, {n}.",
            "Um.",
            "Okay.",
        ],
    }
}

fn utterance(code: &str, rng: &mut ChaCha8Rng) -> String {
    let options = templates(code);
    let template = options[rng.random_range(0..options.len())];
    template.replace("{n}", NAMES[rng.random_range(0..NAMES.len())])
}

/// One synthetic lesson of `turns` turns with its gold labels.
pub fn synthetic_lesson(lesson_id: &str, turns: usize, seed: u64) -> (Lesson, GoldAnnotationSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = WeightedIndex::new(WEIGHTS.iter().map(|(_, w)| *w)).expect("weights are positive");
    let mut lesson = Lesson {
        lesson_id: lesson_id.to_string(),
        subject: "synthetic".to_string(),
        turns: Vec::with_capacity(turns),
    };
    let mut gold = GoldAnnotationSet {
        lesson_id: lesson_id.to_string(),
        labels: Default::default(),
    };
    for i in 0..turns {
        let turn_id = i as u32 + 1;
        let first = WEIGHTS[dist.sample(&mut rng)].0;
        let mut codes = CodeSet::from([first.to_string()]);
        let mut text = utterance(first, &mut rng);
        if first != UNCODED && rng.random_bool(0.2) {
            let second = WEIGHTS[dist.sample(&mut rng)].0;
            if second != UNCODED && second != first {
                codes.insert(second.to_string());
                text.push(' ');
                text.push_str(&utterance(second, &mut rng));
            }
        }
        let speaker = if i % 2 == 0 {
            "Teacher".to_string()
        } else {
            NAMES[rng.random_range(0..NAMES.len())].to_string()
        };
        lesson.turns.push(Turn::new(turn_id, speaker, text));
        gold.labels.insert(turn_id, codes);
    }
    (lesson, gold)
}

/// `lessons` synthetic lessons named `<prefix>-1`, `<prefix>-2`, ...
pub fn synthetic_corpus(
    prefix: &str,
    lessons: usize,
    turns_per_lesson: usize,
    seed: u64,
) -> (Vec<Lesson>, Vec<GoldAnnotationSet>) {
    (0..lessons)
        .map(|i| {
            let sub_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
            synthetic_lesson(&format!("{prefix}-{}", i + 1), turns_per_lesson, sub_seed)
        })
        .unzip()
}
