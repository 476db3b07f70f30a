#![no_main]
use hgae_core::analysis::parse_rates;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if data.len() < 64 {
        let _ = parse_rates(data);
    }
});
