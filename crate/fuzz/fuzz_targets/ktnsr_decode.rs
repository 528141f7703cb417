#![no_main]

use kampnet::autodiff::checkpoint::{decode, encode};
use kampnet::model::Model;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((store, manifest)) = decode(data) {
        // payloads may hold NaN, so compare re-encoded bytes rather than values
        let bytes = encode(&store, manifest.metadata);
        let (again, m2) = decode(&bytes).expect("own output decodes");
        assert_eq!(encode(&again, m2.metadata), bytes);
    }
    let _ = Model::from_checkpoint(data);
});
