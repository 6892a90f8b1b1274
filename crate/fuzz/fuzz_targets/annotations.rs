#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(set) = aqua_data::coco::parse_annotations(text) {
            // whatever parses must serialise and parse again
            aqua_data::coco::parse_annotations(&aqua_data::coco::annotations_to_string(&set)).unwrap();
        }
    }
});
