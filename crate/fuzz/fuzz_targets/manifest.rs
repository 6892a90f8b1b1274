#![no_main]

use aqua_data::dataset::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = DatasetManifest::from_json(text) {
            DatasetManifest::from_json(&m.to_json()).unwrap();
            let _ = m.sha256();
        }
    }
});
