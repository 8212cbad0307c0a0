#![no_main]

use dialogic_core::coder::{parse_batch_request, render_batch_request};
use dialogic_core::transcript::Batch;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Some(turns) = parse_batch_request(text) {
        if turns.is_empty() {
            return;
        }
        let batch = Batch { lesson_id: "fuzz", ordinal: 1, turns: &turns };
        let rendered = render_batch_request(&batch, true);
        assert_eq!(parse_batch_request(&rendered).as_deref(), Some(&turns[..]));
    }
});
