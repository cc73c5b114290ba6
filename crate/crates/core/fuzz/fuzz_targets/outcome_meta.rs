#![no_main]
use libfuzzer_sys::fuzz_target;
use lexlens::intervene::OutcomeMeta;

fuzz_target!(|data: &[u8]| {
    if let Ok(meta) = OutcomeMeta::parse("outcomes.json", data) {
        let bytes = serde_json::to_vec(&meta).unwrap();
        assert_eq!(OutcomeMeta::parse("outcomes.json", &bytes).unwrap(), meta);
    }
});
