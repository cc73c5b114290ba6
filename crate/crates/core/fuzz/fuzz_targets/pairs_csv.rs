#![no_main]
use libfuzzer_sys::fuzz_target;
use lexlens::pairing::PairSet;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = PairSet::from_csv("pairs.csv", data) {
        let bytes = p.to_csv().expect("parsed pairs serialize");
        let again = PairSet::from_csv("pairs.csv", &bytes).expect("serialized pairs parse");
        assert_eq!(p, again);
    }
});
