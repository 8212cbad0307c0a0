#![no_main]

use dialogic_core::experiment::ExperimentDefinition;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(def) = ExperimentDefinition::from_json(text) {
        let _ = def.check();
    }
});
