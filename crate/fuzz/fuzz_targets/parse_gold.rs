#![no_main]

use dialogic_core::codebook::builtin_cdas;
use dialogic_core::transcript::{parse_gold, parse_transcript};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // Input is `<transcript>\0<gold>`; without a separator the lesson is fixed.
    let (lesson_text, gold_text) = text
        .split_once('\0')
        .unwrap_or(("1\tTeacher\tHello.\n2\tSam\tWhy?\n3\tTeacher\tBecause.\n", text));
    let Ok(lesson) = parse_transcript(lesson_text) else { return };
    if let Ok(gold) = parse_gold(gold_text, &lesson, &builtin_cdas()) {
        for codes in gold.labels.values() {
            assert!(!codes.is_empty());
            assert!(!codes.contains("UC") || codes.len() == 1);
        }
    }
});
