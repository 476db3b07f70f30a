#![no_main]
use hgae_core::config::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(c) = Config::from_json(data) {
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
    }
});
