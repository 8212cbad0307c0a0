#![no_main]

use dialogic_core::store::{parse_log, render_report, RunRecord};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(log) = parse_log(text) {
        let record = RunRecord::replay(log.records.iter().map(|r| &r.event));
        let _ = render_report(&record);
    }
});
