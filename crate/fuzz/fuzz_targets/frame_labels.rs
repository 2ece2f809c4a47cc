#![no_main]

use cdl::datamodel::FrameLabels;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(labels) = FrameLabels::parse(text) {
            assert!(!labels.is_empty());
            assert!(labels.as_slice().iter().all(|&b| b <= 1));
        }
    }
});
