#![no_main]

use libfuzzer_sys::fuzz_target;
use sonoseg::trainer::parse_log;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_log(text) {
        assert!(rows.len() <= text.lines().count());
    }
});
