#![no_main]

use dpiqa::distill::FeatureCache;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = FeatureCache::decode(data) {
        assert_eq!(FeatureCache::encode(&map), data);
    }
});
