#![no_main]

use dialogic_core::transcript::{make_batches, parse_transcript};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(lesson) = parse_transcript(text) {
        let again = parse_transcript(&lesson.to_document()).expect("serialized lesson parses");
        assert_eq!(again.turns, lesson.turns);
        if let Ok(batches) = make_batches(&lesson, 7) {
            assert_eq!(batches.iter().map(|b| b.turns.len()).sum::<usize>(), lesson.turns.len());
        }
    }
});
