#![no_main]

use aqua_detector::checkpoint;
use libfuzzer_sys::fuzz_target;
use sha2::{Digest, Sha256};

fuzz_target!(|data: &[u8]| {
    let _ = checkpoint::decode(data);
    // with a valid trailer the mutations reach the header and payload
    if data.len() > 32 {
        let body = &data[..data.len() - 32];
        let mut fixed = body.to_vec();
        fixed.extend_from_slice(&Sha256::digest(body));
        if let Ok(trainer) = checkpoint::decode(&fixed) {
            let _ = checkpoint::decode(&checkpoint::encode(&trainer)).unwrap();
        }
    }
});
