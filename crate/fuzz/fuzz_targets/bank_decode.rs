#![no_main]
use libfuzzer_sys::fuzz_target;
use mpa_core::bank::{decode_bank, encode_bank};

// Anything that decodes must re-encode to the same bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok(bank) = decode_bank(data) {
        if !bank.records.is_empty() {
            assert_eq!(encode_bank(&bank.records).unwrap(), data);
        }
    }
});
