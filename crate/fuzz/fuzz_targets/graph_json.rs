#![no_main]
use hgae_core::hetgraph::GraphConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = GraphConfig::from_json(data);
});
