#![no_main]

use dpiqa::config::RunConfig;
use dpiqa::kv::KvDoc;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(doc) = KvDoc::parse(text) {
        // printing and re-reading a document is lossless
        let again = KvDoc::parse(&doc.to_string()).expect("printed document parses");
        assert_eq!(doc, again);
    }
    if let Ok(cfg) = RunConfig::parse(text) {
        let again = RunConfig::parse(&cfg.to_kv().to_string()).expect("effective config parses");
        assert_eq!(cfg, again);
    }
});
