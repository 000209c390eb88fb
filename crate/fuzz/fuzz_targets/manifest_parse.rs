#![no_main]

use libfuzzer_sys::fuzz_target;
use sonoseg::data::parse_manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ids) = parse_manifest(text) {
        let mut joined = ids.join("\n");
        joined.push('\n');
        assert_eq!(parse_manifest(&joined).expect("rewritten manifest parses"), ids);
    }
});
