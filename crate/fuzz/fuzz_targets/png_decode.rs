#![no_main]
use libfuzzer_sys::fuzz_target;
use mpa_core::hma::Raster;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = Raster::from_png(data) {
        assert_eq!(r.pixels().len(), (r.width() * r.height() * 3) as usize);
        let back = Raster::from_png(&r.to_png()).expect("own output decodes");
        assert_eq!(back, r);
    }
});
