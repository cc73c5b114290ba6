#![no_main]
use libfuzzer_sys::fuzz_target;
use lexlens::store::lexa;

fuzz_target!(|data: &[u8]| {
    let _ = lexa::decode_header("fuzz.lexa", data);
    if let Ok(m) = lexa::decode("fuzz.lexa", data) {
        // Decoding is lossless, including NaN payloads.
        let bytes = lexa::encode(&m);
        assert_eq!(bytes, data, "re-encoding changed the bytes");
    }
});
