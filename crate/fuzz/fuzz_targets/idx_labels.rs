#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = dfm_core::data::idx::parse_idx_labels(data) {
        let bytes = dfm_core::data::idx::encode_idx_labels(&labels);
        let again = dfm_core::data::idx::parse_idx_labels(&bytes).expect("round trip");
        assert_eq!(again, labels);
    }
});
