//! Multi-channel Hounsfield-unit coding.
//!
//! The HU axis is split into three intervals, each stretched onto a full byte
//! range in its own channel:
//!
//! | channel | tissue             | HU interval      |
//! |---------|--------------------|------------------|
//! | 0       | emphysema          | `[-1024, -900]`  |
//! | 1       | calcification/bone | `(0, 300]`, clamped above |
//! | 2       | fat / soft tissue  | `(-900, 0]`      |
//!
//! A pixel is owned by exactly one interval, so at most one channel is
//! nonzero. Bytes are rounded half away from zero.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CodingError, Error};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;
pub const EMPHYSEMA_UPPER: f64 = -900.0;
pub const FAT_UPPER: f64 = 0.0;
pub const CALCIFICATION_TOP: f64 = 300.0;

pub const CH_EMPHYSEMA: usize = 0;
pub const CH_CALCIFICATION: usize = 1;
pub const CH_FAT: usize = 2;

/// Three byte planes, stored planar (`3 x height x width`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl CodedImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, CodingError> {
        if width == 0 || height == 0 {
            return Err(CodingError::EmptySlice);
        }
        if data.len() != 3 * width * height {
            return Err(CodingError::NotTwoD {
                width,
                height,
                len: data.len() / 3,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, channel: usize) -> &[u8] {
        let n = self.width * self.height;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = y * self.width + x;
        let n = self.width * self.height;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn as_planar(&self) -> &[u8] {
        &self.data
    }

    /// Planar `f32` copy of the bytes.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| b as f32).collect()
    }

    /// 8-bit RGB PNG with R = channel 0, G = channel 1, B = channel 2.
    pub fn save_png(&self, path: &Path) -> Result<(), Error> {
        let mut rgb = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                rgb.put_pixel(x as u32, y as u32, image::Rgb(self.pixel(x, y)));
            }
        }
        rgb.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Codes one (possibly fractional) HU value into the three channel bytes.
pub fn encode_value(hu: f64) -> [u8; 3] {
    let hu = hu.clamp(HU_MIN as f64, HU_MAX as f64);
    let mut out = [0u8; 3];
    if hu <= EMPHYSEMA_UPPER {
        out[CH_EMPHYSEMA] = to_byte(255.0 * (hu - HU_MIN as f64) / (EMPHYSEMA_UPPER - HU_MIN as f64));
    } else if hu <= FAT_UPPER {
        out[CH_FAT] = to_byte(255.0 * (hu - EMPHYSEMA_UPPER) / (FAT_UPPER - EMPHYSEMA_UPPER));
    } else {
        out[CH_CALCIFICATION] = to_byte(255.0 * hu.min(CALCIFICATION_TOP) / CALCIFICATION_TOP);
    }
    out
}

/// HU at the center of the quantization bin of `byte` in `channel`.
pub fn decode_value(channel: usize, byte: u8) -> f64 {
    let b = byte as f64 / 255.0;
    match channel {
        CH_EMPHYSEMA => HU_MIN as f64 + b * (EMPHYSEMA_UPPER - HU_MIN as f64),
        CH_FAT => EMPHYSEMA_UPPER + b * (FAT_UPPER - EMPHYSEMA_UPPER),
        CH_CALCIFICATION => b * CALCIFICATION_TOP,
        _ => panic!("channel {channel} out of range"),
    }
}

/// Codes a row-major `width x height` HU slice.
pub fn encode_slice(hu: &[i16], width: usize, height: usize) -> Result<CodedImage, CodingError> {
    if hu.is_empty() || width == 0 || height == 0 {
        return Err(CodingError::EmptySlice);
    }
    if hu.len() != width * height {
        return Err(CodingError::NotTwoD {
            width,
            height,
            len: hu.len(),
        });
    }
    let n = hu.len();
    let mut data = vec![0u8; 3 * n];
    for (i, &v) in hu.iter().enumerate() {
        let px = encode_value(v as f64);
        data[i] = px[0];
        data[n + i] = px[1];
        data[2 * n + i] = px[2];
    }
    Ok(CodedImage {
        width,
        height,
        data,
    })
}

/// Single-channel baseline: clamped HU mapped linearly onto `[0, 255]`.
pub fn encode_grayscale(hu: &[i16]) -> Vec<u8> {
    let span = (HU_MAX as f64) - (HU_MIN as f64);
    hu.iter()
        .map(|&v| {
            let c = (v.clamp(HU_MIN, HU_MAX) as f64) - HU_MIN as f64;
            to_byte(255.0 * c / span)
        })
        .collect()
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gray: Option<(f64, f64)>,
}

/// Exact integer moments, so the result does not depend on image order.
#[derive(Default, Clone, Copy)]
struct Moments {
    count: u128,
    sum: u128,
    sum_sq: u128,
}

impl Moments {
    fn push_all(&mut self, bytes: &[u8]) {
        for &b in bytes {
            let v = b as u128;
            self.sum += v;
            self.sum_sq += v * v;
        }
        self.count += bytes.len() as u128;
    }

    fn mean_std(&self) -> (f64, f64) {
        let n = self.count as f64;
        let mean = self.sum as f64 / n;
        // n * sum_sq - sum^2 is exact in integers
        let num = self.count * self.sum_sq - self.sum * self.sum;
        (mean, (num as f64).sqrt() / n)
    }
}

pub fn compute_channel_stats<'a, I>(images: I) -> Result<ChannelStats, CodingError>
where
    I: IntoIterator<Item = &'a CodedImage>,
{
    let mut moments = [Moments::default(); 3];
    let mut any = false;
    for img in images {
        any = true;
        for (c, m) in moments.iter_mut().enumerate() {
            m.push_all(img.plane(c));
        }
    }
    if !any {
        return Err(CodingError::EmptySet);
    }
    let mut stats = ChannelStats {
        mean: [0.0; 3],
        std: [0.0; 3],
        gray: None,
    };
    for (c, m) in moments.iter().enumerate() {
        let (mean, std) = m.mean_std();
        if std <= 0.0 {
            return Err(CodingError::ConstantChannel { channel: c });
        }
        stats.mean[c] = mean;
        stats.std[c] = std;
    }
    Ok(stats)
}

/// Mean and standard deviation of grayscale baseline images.
pub fn compute_gray_stats<'a, I>(images: I) -> Result<(f64, f64), CodingError>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut m = Moments::default();
    for img in images {
        m.push_all(img);
    }
    if m.count == 0 {
        return Err(CodingError::EmptySet);
    }
    let (mean, std) = m.mean_std();
    if std <= 0.0 {
        return Err(CodingError::ConstantChannel { channel: 0 });
    }
    Ok((mean, std))
}

impl ChannelStats {
    /// Standardizes planar 3-channel values in place.
    pub fn apply(&self, planes: &mut [f32]) {
        let n = planes.len() / 3;
        for c in 0..3 {
            let (mean, std) = (self.mean[c], self.std[c]);
            for v in &mut planes[c * n..(c + 1) * n] {
                *v = ((f64::from(*v) - mean) / std) as f32;
            }
        }
    }
}

/// `(in[c] - mean[c]) / std[c]` for every pixel.
pub fn normalize(image: &CodedImage, stats: &ChannelStats) -> Vec<f32> {
    let mut out = image.to_f32();
    stats.apply(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_examples() {
        assert_eq!(encode_value(-1024.0), [0, 0, 0]);
        assert_eq!(encode_value(500.0), [0, 255, 0]);
        // 450 / 900 * 255 = 127.5 rounds away from zero
        assert_eq!(encode_value(-450.0), [0, 0, 128]);
        assert_eq!(encode_value(-900.0), [255, 0, 0]);
        assert_eq!(encode_value(0.0), [0, 0, 255]);
        assert_eq!(encode_value(300.0), [0, 255, 0]);
        assert_eq!(encode_value(-3000.0), [0, 0, 0]);
    }

    #[test]
    fn encode_slice_validates_extent() {
        assert!(matches!(encode_slice(&[], 0, 0), Err(CodingError::EmptySlice)));
        assert!(matches!(
            encode_slice(&[0; 5], 2, 2),
            Err(CodingError::NotTwoD { .. })
        ));
        let img = encode_slice(&[-1024, 500, -450, 0], 2, 2).unwrap();
        assert_eq!(img.pixel(0, 0), [0, 0, 0]);
        assert_eq!(img.pixel(1, 0), [0, 255, 0]);
        assert_eq!(img.pixel(0, 1), [0, 0, 128]);
        assert_eq!(img.pixel(1, 1), [0, 0, 255]);
    }

    #[test]
    fn exhaustive_partition_and_monotonicity() {
        let mut prev = [0u8; 3];
        let mut prev_owner = None;
        for hu in HU_MIN..=HU_MAX {
            let px = encode_value(hu as f64);
            assert!(px.iter().filter(|&&b| b != 0).count() <= 1, "hu {hu}: {px:?}");
            let owner = if hu as f64 <= EMPHYSEMA_UPPER {
                CH_EMPHYSEMA
            } else if hu as f64 <= FAT_UPPER {
                CH_FAT
            } else {
                CH_CALCIFICATION
            };
            if prev_owner == Some(owner) {
                assert!(px[owner] >= prev[owner], "hu {hu} not monotone");
            }
            prev = px;
            prev_owner = Some(owner);
        }
    }

    #[test]
    fn constant_channel_is_an_error() {
        let img = CodedImage::new(2, 1, vec![100, 100, 0, 255, 3, 4]).unwrap();
        assert_eq!(
            compute_channel_stats([&img]),
            Err(CodingError::ConstantChannel { channel: 0 })
        );
    }

    #[test]
    fn two_pixel_stats() {
        let img = CodedImage::new(2, 1, vec![0, 10, 0, 255, 1, 2]).unwrap();
        let stats = compute_channel_stats([&img]).unwrap();
        assert_eq!(stats.mean[1], 127.5);
        assert_eq!(stats.std[1], 127.5);
        assert_eq!(stats.mean[0], 5.0);
        assert_eq!(stats.std[0], 5.0);
    }

    #[test]
    fn normalize_examples() {
        let img = CodedImage::new(2, 1, vec![0, 10, 0, 255, 1, 2]).unwrap();
        let stats = compute_channel_stats([&img]).unwrap();
        let out = normalize(&img, &stats);
        // channel 0: pixel 0 is mean - std, pixel 1 is mean + std
        assert_eq!(&out[0..2], &[-1.0, 1.0]);
        let mid = CodedImage::new(1, 1, vec![5, 0, 0]).unwrap();
        assert_eq!(normalize(&mid, &stats)[0], 0.0);
    }

    #[test]
    fn grayscale_maps_full_range() {
        assert_eq!(encode_grayscale(&[-2000, -1024, 3071, 4000]), vec![0, 0, 255, 255]);
    }

    #[test]
    fn empty_set_is_an_error() {
        let none: Vec<&CodedImage> = Vec::new();
        assert_eq!(compute_channel_stats(none), Err(CodingError::EmptySet));
    }

    fn arb_image() -> impl Strategy<Value = CodedImage> {
        (1usize..5, 1usize..5).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<u8>(), 3 * w * h)
                .prop_map(move |d| CodedImage::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn partition_holds_for_any_hu(hu in any::<i16>()) {
            let px = encode_value(hu as f64);
            prop_assert!(px.iter().filter(|&&b| b != 0).count() <= 1);
        }

        #[test]
        fn bin_centers_re_encode_to_the_same_byte(channel in 0usize..3, byte in any::<u8>()) {
            // byte 0 in channels 1 and 2 means "not owned"; its bin center lies on the neighbour's boundary
            prop_assume!(channel == CH_EMPHYSEMA || byte > 0);
            let hu = decode_value(channel, byte);
            prop_assert_eq!(encode_value(hu)[channel], byte);
        }

        #[test]
        fn stats_are_permutation_invariant(
            images in proptest::collection::vec(arb_image(), 2..6),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let forward = compute_channel_stats(images.iter());
            let mut shuffled = images.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(forward, compute_channel_stats(shuffled.iter()));
        }

        #[test]
        fn normalized_training_set_is_standardized(images in proptest::collection::vec(arb_image(), 2..6)) {
            if let Ok(stats) = compute_channel_stats(images.iter()) {
                let mut sums = [0.0f64; 3];
                let mut sq = [0.0f64; 3];
                let mut count = 0.0;
                for img in &images {
                    let n = img.width() * img.height();
                    let out = normalize(img, &stats);
                    for c in 0..3 {
                        for &v in &out[c * n..(c + 1) * n] {
                            sums[c] += v as f64;
                            sq[c] += (v as f64) * (v as f64);
                        }
                    }
                    count += n as f64;
                }
                for c in 0..3 {
                    let mean = sums[c] / count;
                    let std = (sq[c] / count - mean * mean).sqrt();
                    prop_assert!(mean.abs() < 1e-6, "channel {} mean {}", c, mean);
                    prop_assert!((std - 1.0).abs() < 1e-6, "channel {} std {}", c, std);
                }
            }
        }
    }
}
