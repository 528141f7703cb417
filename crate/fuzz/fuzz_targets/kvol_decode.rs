#![no_main]

use kampnet::dataset::{Clinical, Roi, Volume, VolumeMeta};
use libfuzzer_sys::fuzz_target;

fn meta() -> VolumeMeta {
    VolumeMeta {
        subject_id: "F0000".into(),
        dims: [4, 4, 3],
        label: 1,
        selected_slices: [0, 1, 2],
        roi: Roi { x: 1, y: 1, w: 2, h: 2 },
        clinical: Clinical {
            cac_risk: 1.0,
            emphysema_severity: 2.0,
            muscle_mass: 50.0,
            fat_attenuation: -100.0,
        },
    }
}

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = Volume::decode(data, meta()) {
        assert_eq!(v.encode(), data, "decode then encode must reproduce the input");
    }
});
