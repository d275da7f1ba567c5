#![no_main]
use libfuzzer_sys::fuzz_target;
use quakerank::dataset::SarTile;

fuzz_target!(|data: &[u8]| {
    if let Ok(tile) = SarTile::decode(data) {
        assert_eq!(tile.encode(), data);
    }
});
