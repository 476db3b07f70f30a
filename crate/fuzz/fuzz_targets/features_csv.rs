#![no_main]
use hgae_core::hetgraph::parse_features_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(m) = parse_features_csv(data, "features_fuzz.csv") {
        assert!(m.all_finite());
    }
});
