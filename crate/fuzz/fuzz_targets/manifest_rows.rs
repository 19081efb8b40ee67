#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = dpiqa::dataset::parse_manifest_rows(text, Path::new("fuzz.csv")) {
        for r in &rows {
            assert!(r.mos.is_finite());
        }
    }
});
