#![no_main]
use libfuzzer_sys::fuzz_target;
use mpa_core::provider::parse_embed_response;

// First byte picks how many vectors the caller asked for.
fuzz_target!(|data: &[u8]| {
    let Some((&n, body)) = data.split_first() else { return };
    if let Ok((dim, vectors)) = parse_embed_response(body, usize::from(n % 8)) {
        assert_eq!(vectors.len(), usize::from(n % 8));
        assert!(vectors.iter().all(|v| v.dim() == dim));
    }
});
