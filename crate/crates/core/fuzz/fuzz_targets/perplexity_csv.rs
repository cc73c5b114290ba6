#![no_main]
use libfuzzer_sys::fuzz_target;
use lexlens::intervene::{parse_perplexity_csv, perplexity_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(ppl) = parse_perplexity_csv("perplexity.csv", data) {
        let bytes = perplexity_csv(&ppl).unwrap();
        assert_eq!(parse_perplexity_csv("perplexity.csv", &bytes).unwrap(), ppl);
    }
});
