#![no_main]

use std::path::Path;

use cdl::featstore::ManifestFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = ManifestFile::parse(text, Path::new("fuzz.json")) {
            let again = ManifestFile::parse(&m.to_json(), Path::new("fuzz.json")).unwrap();
            assert_eq!(again.records.len(), m.records.len());
        }
    }
});
