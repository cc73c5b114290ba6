#![no_main]
use libfuzzer_sys::fuzz_target;
use lexlens::synth::GroundTruth;

fuzz_target!(|data: &[u8]| {
    let _ = GroundTruth::parse("ground_truth.json", data);
});
