#![no_main]
use hgae_core::masking::MaskPlan;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(plan) = MaskPlan::from_json(data) {
        let back = MaskPlan::from_json(&plan.to_json()).expect("round trip");
        assert_eq!(back.to_json(), plan.to_json());
    }
});
