#![no_main]

use libfuzzer_sys::fuzz_target;
use sonoseg::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        let _ = cfg.validate();
        // Compare text: a NaN field never equals itself.
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).expect("serialized config parses");
        assert_eq!(back.to_toml(), text);
    }
});
