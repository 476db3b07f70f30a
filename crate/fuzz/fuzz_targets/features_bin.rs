#![no_main]
use hgae_core::hetgraph::{parse_features_bin, write_features_bin};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_features_bin(data, "features_fuzz.bin") {
        // accepted input re-encodes to the same bytes
        assert_eq!(write_features_bin(&m), data);
    }
});
