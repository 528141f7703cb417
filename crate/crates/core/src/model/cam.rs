//! Class activation maps over the patch stream.

use super::{Arch, Model, StreamKind};
use crate::autodiff::kernels::bilinear_resize;
use crate::dataset::augment::{center_crop, CropRect, EVAL_RATIO};
use crate::dataset::CodedSubject;
use crate::error::ModelError;

/// A `[0, 1]` heatmap over the evaluation crop of a patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Crop of the ROI patch the map covers, in patch pixels.
    pub crop: CropRect,
    /// Row-major `crop.side x crop.side`.
    pub data: Vec<f32>,
    /// True when the weighted map was flat (for example an untrained head).
    pub constant: bool,
}

/// `sum_k w[class, k] F_k(x, y)` over the final patch-stream feature maps of
/// view `view`, min-max scaled and bilinearly resized to the crop it covers.
pub fn compute_cam(
    model: &Model,
    subject: &CodedSubject,
    view: usize,
    class: usize,
) -> Result<Heatmap, ModelError> {
    let (offset, head) = match &model.arch {
        Arch::Dual { slice, .. } => (slice.feature_dim(), "dsn_head.weight"),
        Arch::Single { stream } if stream.kind == StreamKind::Patch => (0, "head.weight"),
        _ => return Err(ModelError::Config("CAM needs a patch stream".into())),
    };
    if class > 1 || view > 2 {
        return Err(ModelError::Config(format!("class {class} / view {view} out of range")));
    }
    let net = model.forward_views(subject)?;
    let fm = net
        .graph
        .value(net.stream_nodes(StreamKind::Patch).expect("patch stream").feature_map)
        .expect("evaluated");
    let (_, d, h, w) = fm.dims4().expect("feature maps are 4-d");
    let weights = model.store.get(head).expect("head present");
    let row = &weights.data()[class * weights.shape()[1]..(class + 1) * weights.shape()[1]];
    let maps = &fm.data()[view * d * h * w..(view + 1) * d * h * w];
    let mut cam = vec![0.0f32; h * w];
    for k in 0..d {
        let wk = row[offset + k];
        for (c, &f) in cam.iter_mut().zip(&maps[k * h * w..(k + 1) * h * w]) {
            *c += wk * f;
        }
    }
    let lo = cam.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = cam.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let constant = !(hi > lo);
    if constant {
        log::warn!("{}: class activation map is constant", subject.subject_id);
        cam.iter_mut().for_each(|v| *v = 0.0);
    } else {
        cam.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    }
    let patch = &subject.patches[view];
    let crop = center_crop(patch.width(), patch.height(), EVAL_RATIO);
    let data = bilinear_resize(&cam, w, h, crop.side, crop.side);
    Ok(Heatmap {
        crop,
        data,
        constant,
    })
}

impl Heatmap {
    /// Mean heat inside and outside a ROI-sized mask, restricted to the crop.
    /// `None` when either region is empty.
    pub fn inside_outside(&self, mask: &[bool], roi_width: usize) -> Option<(f64, f64)> {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for y in 0..self.crop.side {
            for x in 0..self.crop.side {
                let v = self.data[y * self.crop.side + x] as f64;
                if mask[(y + self.crop.y) * roi_width + x + self.crop.x] {
                    si += v;
                    ni += 1;
                } else {
                    so += v;
                    no += 1;
                }
            }
        }
        (ni > 0 && no > 0).then(|| (si / ni as f64, so / no as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_stream, tiny_subjects};
    use crate::model::Normalizers;

    fn dual() -> (Vec<CodedSubject>, Model) {
        let subjects = tiny_subjects(2);
        let norm = Normalizers::fit(subjects.iter()).unwrap();
        let arch = Arch::Dual {
            slice: tiny_stream(StreamKind::Slice),
            patch: tiny_stream(StreamKind::Patch),
        };
        (subjects.clone(), Model::init(arch, norm, 3).unwrap())
    }

    #[test]
    fn zero_head_gives_constant_map() {
        let (subjects, mut m) = dual();
        m.store
            .get_mut("dsn_head.weight")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let cam = compute_cam(&m, &subjects[0], 0, 0).unwrap();
        assert!(cam.constant);
        assert!(cam.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_weights_follow_the_mean_feature_map() {
        let (subjects, mut m) = dual();
        let w = m.store.get_mut("dsn_head.weight").unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = 0.25);
        let cam = compute_cam(&m, &subjects[0], 1, 1).unwrap();
        // oracle: mean feature map, min-max scaled
        let net = m.forward_views(&subjects[0]).unwrap();
        let fm = net
            .graph
            .value(net.stream_nodes(StreamKind::Patch).unwrap().feature_map)
            .unwrap();
        let (_, d, h, ww) = fm.dims4().unwrap();
        let view = &fm.data()[d * h * ww..2 * d * h * ww];
        let mean: Vec<f64> = (0..h * ww)
            .map(|p| (0..d).map(|k| view[k * h * ww + p] as f64).sum::<f64>() / d as f64)
            .collect();
        let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let expected: Vec<f32> = mean.iter().map(|v| ((v - lo) / (hi - lo)) as f32).collect();
        let up = bilinear_resize(&expected, ww, h, cam.crop.side, cam.crop.side);
        for (a, b) in cam.data.iter().zip(&up) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert!(cam.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
