#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // must never panic; on success the matrix must be well-formed
        if let Ok(t) = funnels::data::parse_csv(text) {
            assert_eq!(t.shape.len(), 2);
            assert_eq!(t.data.len(), t.shape[0] * t.shape[1]);
        }
    }
});
