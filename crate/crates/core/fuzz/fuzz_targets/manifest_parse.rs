#![no_main]
use libfuzzer_sys::fuzz_target;
use lexlens::store::manifest::Manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = Manifest::parse("manifest.json", data) {
        let again = Manifest::parse("manifest.json", &m.to_json_bytes()).expect("canonical bytes parse");
        assert_eq!(m, again);
    }
});
