#![no_main]

use kampnet::dataset::VolumeMeta;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(meta) = VolumeMeta::from_json(text) {
        let again = VolumeMeta::from_json(&meta.to_json()).expect("own output parses");
        assert_eq!(again, meta);
    }
});
