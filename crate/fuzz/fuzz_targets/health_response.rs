#![no_main]
use libfuzzer_sys::fuzz_target;
use mpa_core::provider::parse_health_response;

fuzz_target!(|data: &[u8]| {
    if let Ok(h) = parse_health_response(data) {
        assert!(h.dim > 0);
        assert_eq!(h.status, "ok");
    }
});
