#![no_main]

use kampnet::svm::SvmModel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = SvmModel::from_json(text) {
        let _ = model.predict_proba(&[0.0; 4]);
    }
});
