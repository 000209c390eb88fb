#![no_main]

use libfuzzer_sys::fuzz_target;
use sonoseg::data::{decode_image, resize_image, resize_mask, to_gray, to_mask};

fuzz_target!(|data: &[u8]| {
    let Ok(img) = decode_image(data) else { return };
    // Keep huge headers from turning into huge allocations downstream.
    if u64::from(img.width()) * u64::from(img.height()) > 1 << 20 {
        return;
    }
    let gray = to_gray(&img);
    assert!(gray.data.iter().all(|v| (0.0..=1.0).contains(v)));
    let mask = to_mask(&img);
    assert!(mask.data.iter().all(|&v| v <= 1));
    let _ = resize_image(&gray, 8, 8);
    let _ = resize_mask(&mask, 8, 8);
});
