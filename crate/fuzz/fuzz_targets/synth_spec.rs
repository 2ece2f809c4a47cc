#![no_main]

use cdl::synthgen::SynthSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = toml::from_str::<SynthSpec>(text) {
            let _ = spec.validate();
        }
    }
});
