#![no_main]

use kampnet::dataset::read_clinical_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_clinical_csv(data);
});
