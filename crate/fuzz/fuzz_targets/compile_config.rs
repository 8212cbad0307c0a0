#![no_main]

use dialogic_core::prompt::{compile_instructions, InstructionConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(config) = serde_json::from_slice::<InstructionConfig>(data) else { return };
    if let Ok(doc) = compile_instructions(&config) {
        let mut end = 0;
        for span in &doc.section_map {
            assert!(span.start >= end && span.end <= doc.text.len());
            assert!(doc.text.is_char_boundary(span.start) && doc.text.is_char_boundary(span.end));
            end = span.end;
        }
        assert_eq!(doc.config_hash, config.config_hash());
    }
});
