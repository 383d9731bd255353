#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(imgs) = dfm_core::data::idx::parse_idx_images(data) {
        // Anything that decodes must survive an encode/decode round trip.
        let bytes = dfm_core::data::idx::encode_idx_images(imgs.rows, imgs.cols, &imgs.pixels);
        let again = dfm_core::data::idx::parse_idx_images(&bytes).expect("round trip");
        assert_eq!(again.rows, imgs.rows);
        assert_eq!(again.cols, imgs.cols);
        assert_eq!(again.pixels, imgs.pixels);
    }
});
