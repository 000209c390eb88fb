#![no_main]

use libfuzzer_sys::fuzz_target;
use sonoseg::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // Anything that decodes must survive a round trip unchanged.
        let again = Checkpoint::decode(&ck.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), ck.encode());
    }
});
