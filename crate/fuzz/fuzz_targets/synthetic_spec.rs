#![no_main]
use hgae_core::analysis::{synthesize, SyntheticSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let Ok(spec) = SyntheticSpec::from_json(data) else { return };
    let small = spec.target_count <= 300
        && spec.target_dim <= 64
        && spec.intermediates.iter().all(|i| i.count <= 300 && i.dim <= 64);
    if small {
        if let Ok(g) = synthesize(&spec) {
            assert!(g.validate().is_empty());
        }
    }
});
