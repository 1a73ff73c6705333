#![no_main]

use dpvae::data::idx::{encode_idx_images, parse_idx_images};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = parse_idx_images(data) {
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // Anything that parses must re-encode to the same pixels.
        let rows = u32::from_be_bytes(data[8..12].try_into().unwrap()) as usize;
        let cols = u32::from_be_bytes(data[12..16].try_into().unwrap()) as usize;
        if let Ok(bytes) = encode_idx_images(&t, rows, cols) {
            assert_eq!(parse_idx_images(&bytes).unwrap(), t);
        }
    }
});
