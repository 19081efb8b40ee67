#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(img) = dpiqa::dataset::decode_image(data) else {
        return;
    };
    // keep huge declared sizes from dominating the run
    if u64::from(img.width()) * u64::from(img.height()) > 1 << 20 {
        return;
    }
    if let Ok(p) = dpiqa::dataset::preprocess_image_to(&img, 32) {
        assert!(p.pixels().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
});
