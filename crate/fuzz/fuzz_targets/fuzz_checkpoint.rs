#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // binary checkpoint decoding must never panic on arbitrary bytes
    if let Ok((spec, store)) = funnels::model::parse_checkpoint(data) {
        // a successfully parsed checkpoint must rebuild or fail cleanly
        let _ = spec.build();
        assert!(store.names().count() <= 1 << 20);
    }
});
