#![no_main]
use libfuzzer_sys::fuzz_target;
use lexlens::intervene::InterventionPlan;

fuzz_target!(|data: &[u8]| {
    if let Ok(plan) = InterventionPlan::parse("plan.json", data) {
        assert!(plan.check().is_ok());
        let again = InterventionPlan::parse("plan.json", &plan.to_json_bytes()).expect("canonical plan parses");
        assert_eq!(plan, again);
    }
});
