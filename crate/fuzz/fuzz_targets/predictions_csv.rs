#![no_main]

use kampnet::experiment::outputs::{predictions_csv, read_predictions_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_predictions_csv(data) {
        let bytes = predictions_csv(&rows).expect("rows serialize");
        assert_eq!(read_predictions_csv(&bytes).expect("own output parses"), rows);
    }
});
