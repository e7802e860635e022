#![no_main]

use libfuzzer_sys::fuzz_target;
use qef_core::io::ModelFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(model) = ModelFile::parse(text) else {
        return;
    };
    // Anything that parses must re-serialize to an equivalent file.
    let again = ModelFile::parse(&model.to_json()).expect("round trip");
    assert_eq!(again.to_json(), model.to_json());
    // Cap the size so validation stays cheap.
    if text.len() < 4096 {
        let _ = model.build();
    }
});
