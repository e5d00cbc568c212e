#![no_main]
use libfuzzer_sys::fuzz_target;
use mpa_core::lmse::VariantCache;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cache) = VariantCache::parse(text) {
        let json = cache.to_json();
        let again = VariantCache::parse(&json).expect("own output parses");
        assert_eq!(again.to_json(), json);
    }
});
