#![no_main]

use std::path::Path;

use cdl_cli::{Overrides, RunConfig, RunConfigFile};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = RunConfigFile::parse(text, Path::new("fuzz.toml")) {
            if let Ok(cfg) = RunConfig::resolve(file, &Overrides::default()) {
                cfg.train.validate().unwrap();
                let _ = cfg.to_toml();
            }
        }
    }
});
