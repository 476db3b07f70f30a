#![no_main]
use hgae_core::params::ParamStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = ParamStore::decode(data) {
        let again = ParamStore::decode(&p.encode()).expect("re-encoded store decodes");
        assert_eq!(again.encode(), p.encode());
    }
});
