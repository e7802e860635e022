#![no_main]

use libfuzzer_sys::fuzz_target;
use qef_cli::output::validate_document;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = validate_document(text);
    }
});
