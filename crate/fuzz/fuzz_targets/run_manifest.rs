#![no_main]

use kampnet::experiment::outputs::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = RunManifest::from_json(data) {
        let _ = m.config();
    }
});
