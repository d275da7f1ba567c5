#![no_main]
use libfuzzer_sys::fuzz_target;
use quakerank::model::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok((params, meta)) = decode_checkpoint(data) {
        let again = encode_checkpoint(&params, &meta).unwrap();
        let (back, _) = decode_checkpoint(&again).unwrap();
        assert_eq!(back, params);
    }
});
