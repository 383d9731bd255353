#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = dfm_core::data::corrupt::Corruption::parse(text) {
            // Display and parse are inverses for every accepted spec.
            let again = dfm_core::data::corrupt::Corruption::parse(&c.to_string())
                .expect("printed spec re-parses");
            assert_eq!(again, c);
        }
    }
});
