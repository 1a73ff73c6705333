#![no_main]

use dpvae::data::csvio::parse_csv_dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_csv_dataset(data, "fuzz") {
        assert_eq!(ds.instances().rows(), ds.len());
    }
});
