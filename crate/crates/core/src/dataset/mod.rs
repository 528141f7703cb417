//! Volumes, phantoms, per-subject input extraction and augmentation.

pub mod augment;
pub mod phantom;
pub mod store;
pub mod volume;

use crate::coding::{encode_slice, CodedImage};
use crate::error::VolumeError;

pub use phantom::{calcification_mask, generate_phantoms, EffectSizes, PhantomSpec};
pub use store::{dataset_hash, load_dataset, save_dataset};
pub use volume::{
    load_volume, read_clinical_csv, save_volume, write_clinical_csv, Clinical, Roi, Volume,
    VolumeMeta,
};

/// Raw HU planes for one subject: whole slices and ROI patches at the three
/// selected depths, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectInputs {
    pub slice_size: (usize, usize),
    pub patch_size: (usize, usize),
    pub slices: [Vec<i16>; 3],
    pub patches: [Vec<i16>; 3],
}

pub fn extract_inputs(volume: &Volume) -> Result<SubjectInputs, VolumeError> {
    let meta = &volume.meta;
    meta.validate()?;
    let [nx, ny, _] = meta.dims;
    let roi = meta.roi;
    let slices = meta.selected_slices.map(|z| volume.slice(z).to_vec());
    let patches = meta.selected_slices.map(|z| {
        let plane = volume.slice(z);
        let mut patch = Vec::with_capacity(roi.w * roi.h);
        for y in roi.y..roi.y + roi.h {
            patch.extend_from_slice(&plane[y * nx + roi.x..y * nx + roi.x + roi.w]);
        }
        patch
    });
    Ok(SubjectInputs {
        slice_size: (nx, ny),
        patch_size: (roi.w, roi.h),
        slices,
        patches,
    })
}

/// A subject after HU coding: everything the models consume.
#[derive(Clone, Debug)]
pub struct CodedSubject {
    pub subject_id: String,
    pub label: u8,
    pub clinical: [f64; 4],
    pub slices: [CodedImage; 3],
    pub patches: [CodedImage; 3],
}

pub fn code_subject(volume: &Volume) -> Result<CodedSubject, crate::Error> {
    let inputs = extract_inputs(volume)?;
    let (sw, sh) = inputs.slice_size;
    let (pw, ph) = inputs.patch_size;
    let code = |planes: &[Vec<i16>; 3], w, h| -> Result<[CodedImage; 3], crate::Error> {
        Ok([
            encode_slice(&planes[0], w, h)?,
            encode_slice(&planes[1], w, h)?,
            encode_slice(&planes[2], w, h)?,
        ])
    };
    Ok(CodedSubject {
        subject_id: volume.meta.subject_id.clone(),
        label: volume.meta.label,
        clinical: volume.meta.clinical.to_array(),
        slices: code(&inputs.slices, sw, sh)?,
        patches: code(&inputs.patches, pw, ph)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(roi: Roi, selected: [usize; 3]) -> Volume {
        let meta = VolumeMeta {
            subject_id: "S0001".into(),
            dims: [6, 5, 50],
            label: 0,
            selected_slices: selected,
            roi,
            clinical: Clinical {
                cac_risk: 0.0,
                emphysema_severity: 1.0,
                muscle_mass: 2.0,
                fat_attenuation: 3.0,
            },
        };
        let voxels = (0..meta.voxel_count()).map(|i| (i % 4000) as i16 - 1000).collect();
        Volume::new(meta, voxels).unwrap()
    }

    #[test]
    fn slices_follow_selected_order() {
        let roi = Roi { x: 0, y: 0, w: 2, h: 2 };
        let vol = ramp_volume(roi, [40, 41, 42]);
        let inputs = extract_inputs(&vol).unwrap();
        for (k, z) in [40, 41, 42].into_iter().enumerate() {
            assert_eq!(inputs.slices[k], vol.slice(z));
        }
    }

    #[test]
    fn corner_roi_patch_origin_matches_voxel() {
        let roi = Roi { x: 3, y: 2, w: 3, h: 3 };
        let vol = ramp_volume(roi, [7, 8, 9]);
        let inputs = extract_inputs(&vol).unwrap();
        for (k, z) in [7, 8, 9].into_iter().enumerate() {
            let p = &inputs.patches[k];
            assert_eq!(p.len(), 9);
            assert_eq!(p[0], vol.voxel(3, 2, z));
            assert_eq!(p[8], vol.voxel(5, 4, z));
        }
    }
}
