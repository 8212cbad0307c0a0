#![no_main]

use dialogic_core::codebook::parse_codebook;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(codebook) = parse_codebook(text) {
        // Anything accepted must survive its own serializer.
        let again = parse_codebook(&codebook.to_document()).expect("serialized codebook parses");
        assert_eq!(again, codebook);
    }
});
