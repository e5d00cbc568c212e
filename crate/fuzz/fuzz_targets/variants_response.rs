#![no_main]
use libfuzzer_sys::fuzz_target;
use mpa_core::provider::parse_variants_response;

fuzz_target!(|data: &[u8]| {
    let Some((&n, body)) = data.split_first() else { return };
    let n = usize::from(n % 8);
    if let Ok(descriptions) = parse_variants_response(body, n) {
        assert_eq!(descriptions.len(), n + 1);
        assert!(descriptions.iter().all(|d| !d.trim().is_empty()));
    }
});
