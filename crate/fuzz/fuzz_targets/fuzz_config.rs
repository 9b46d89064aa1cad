#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // config parsing (including model-spec validation) must never panic
        if let Ok(cfg) = funnels::training::TrainConfig::from_json(text) {
            let _ = cfg.model.build();
        }
    }
});
