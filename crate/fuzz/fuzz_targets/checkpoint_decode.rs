#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = dfm_core::nn::checkpoint::decode(data) {
        // Decoded entries are internally consistent: data length matches shape.
        for (_, p) in &entries {
            assert_eq!(p.data.len(), p.shape.iter().product::<usize>());
        }
    }
});
