#![no_main]

use kampnet::experiment::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml(text) {
        let text = cfg.to_toml();
        let again = ExperimentConfig::from_toml(&text).expect("own output parses");
        assert_eq!(again.to_toml(), text);
    }
    // overrides take the same text as a `key=value` assignment
    let _ = ExperimentConfig::default().set(text);
});
