#![no_main]

use std::path::Path;

use cdl::featstore::{decode_blob, encode_blob};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(blob) = decode_blob(data, Path::new("fuzz")) {
        assert!(blob.timesteps() > 0);
        assert_eq!(decode_blob(&encode_blob(&blob), Path::new("fuzz")).unwrap(), blob);
    }
});
