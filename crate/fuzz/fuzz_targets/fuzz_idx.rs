#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // must never panic; on success the image set must satisfy its invariants
    if let Ok(set) = funnels::data::parse_idx(data) {
        assert_eq!(set.values.len(), set.count * set.height * set.width * set.channels);
        assert_eq!(set.bits, 8);
        assert!(set.values.iter().all(|&v| v < 256));
    }
});
