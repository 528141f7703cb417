//! Square random crops with bilinear resizing to the network input size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::bilinear_resize;

/// Crop ratio range used during training.
pub const TRAIN_RATIO: (f64, f64) = (0.6, 0.8);
/// Deterministic center-crop ratio used at evaluation time.
pub const EVAL_RATIO: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub side: usize,
}

fn side_for(width: usize, height: usize, ratio: f64) -> usize {
    let short = width.min(height);
    ((ratio * short as f64).round() as usize).clamp(1, short)
}

pub fn center_crop(width: usize, height: usize, ratio: f64) -> CropRect {
    let side = side_for(width, height, ratio);
    CropRect {
        x: (width - side) / 2,
        y: (height - side) / 2,
        side,
    }
}

/// Draws a ratio uniformly from [`TRAIN_RATIO`] and a uniformly placed square
/// of that relative size. Returns the rectangle and the ratio.
pub fn sample_crop<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> (CropRect, f64) {
    let ratio = rng.random_range(TRAIN_RATIO.0..=TRAIN_RATIO.1);
    let side = side_for(width, height, ratio);
    let x = rng.random_range(0..=width - side);
    let y = rng.random_range(0..=height - side);
    (CropRect { x, y, side }, ratio)
}

/// Crops every plane of a planar image and resizes to `out x out`.
pub fn crop_resize(
    planes: &[f32],
    channels: usize,
    width: usize,
    height: usize,
    rect: CropRect,
    out: usize,
) -> Vec<f32> {
    assert_eq!(planes.len(), channels * width * height, "planar length");
    assert!(rect.x + rect.side <= width && rect.y + rect.side <= height, "crop inside image");
    let mut result = Vec::with_capacity(channels * out * out);
    let mut window = Vec::with_capacity(rect.side * rect.side);
    for c in 0..channels {
        let plane = &planes[c * width * height..(c + 1) * width * height];
        window.clear();
        for y in rect.y..rect.y + rect.side {
            window.extend_from_slice(&plane[y * width + rect.x..y * width + rect.x + rect.side]);
        }
        result.extend(bilinear_resize(&window, rect.side, rect.side, out, out));
    }
    result
}

/// Training view: random crop, then resize.
pub fn augment<R: Rng + ?Sized>(
    planes: &[f32],
    channels: usize,
    width: usize,
    height: usize,
    out: usize,
    rng: &mut R,
) -> Vec<f32> {
    let (rect, _) = sample_crop(width, height, rng);
    crop_resize(planes, channels, width, height, rect, out)
}

/// Evaluation view: center crop at [`EVAL_RATIO`], then resize.
pub fn eval_view(planes: &[f32], channels: usize, width: usize, height: usize, out: usize) -> Vec<f32> {
    crop_resize(planes, channels, width, height, center_crop(width, height, EVAL_RATIO), out)
}
