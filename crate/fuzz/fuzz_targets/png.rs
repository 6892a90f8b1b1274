#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = aqua_data::pngio::decode_png(data) {
        assert!(image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bytes = aqua_data::pngio::encode_png(&image).unwrap();
        assert_eq!(aqua_data::pngio::decode_png(&bytes).unwrap(), image);
    }
});
