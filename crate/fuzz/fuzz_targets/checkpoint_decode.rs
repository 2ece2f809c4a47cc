#![no_main]

use std::path::Path;

use cdl::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = decode(data, Path::new("fuzz.ckpt")) {
        assert_eq!(decode(&encode(&state).unwrap(), Path::new("fuzz.ckpt")).unwrap(), state);
    }
});
