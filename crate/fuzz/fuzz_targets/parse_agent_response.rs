#![no_main]

use dialogic_core::codebook::builtin_cdas;
use dialogic_core::coder::parse_agent_response;
use dialogic_core::transcript::{Batch, Turn};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let turns = [
        Turn::new(241, "Teacher", "Good, and the two halves make one whole. Noor?"),
        Turn::new(242, "Maya", "Twelve, because six and six."),
        Turn::new(243, "Teacher", "Noor?"),
    ];
    let batch = Batch { lesson_id: "fuzz", ordinal: 1, turns: &turns };
    if let Ok(parsed) = parse_agent_response(text, &batch, &builtin_cdas()) {
        for coding in &parsed.codings {
            assert!(!coding.predicted.is_empty());
            assert!(coding.raw_span.end <= text.len());
        }
    }
});
