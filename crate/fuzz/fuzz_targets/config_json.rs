#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Accepted configs must have passed their own validation.
        if let Ok(cfg) = dfm_core::harness::ExperimentConfig::from_json(text) {
            cfg.validate().expect("from_json only returns validated configs");
        }
    }
});
