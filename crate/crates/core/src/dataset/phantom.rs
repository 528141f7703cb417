//! Synthetic chest phantoms with label-dependent planted signal.
//!
//! Each subject has a latent calcification severity and emphysema severity
//! drawn from unit normals whose means shift for deceased subjects by the
//! configured effect sizes. Clinical measurements are drawn independently of
//! the image, from their own label-shifted distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::volume::{Clinical, Roi, Volume, VolumeMeta};

pub const AIR_HU: f64 = -1000.0;
pub const FAT_HU: f64 = -100.0;
pub const SOFT_TISSUE_HU: f64 = 45.0;
pub const LUNG_HU: f64 = -875.0;
pub const EMPHYSEMA_HU: f64 = -975.0;
pub const HEART_HU: f64 = 40.0;
pub const BONE_HU: f64 = 650.0;

/// Label-conditional mean shifts, in units of the latent standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectSizes {
    pub calcification: f64,
    pub emphysema: f64,
    pub clinical: f64,
}

impl Default for EffectSizes {
    fn default() -> Self {
        Self {
            calcification: 1.2,
            emphysema: 0.6,
            clinical: 1.0,
        }
    }
}

impl EffectSizes {
    pub fn none() -> Self {
        Self {
            calcification: 0.0,
            emphysema: 0.0,
            clinical: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub subjects: usize,
    /// In-plane extent `nx = ny`.
    pub extent: usize,
    /// Depth `nz`.
    pub depth: usize,
    /// Side of the square heart ROI.
    pub roi_size: usize,
    pub noise_hu: f64,
    pub fat_ring: f64,
    /// Expected emphysema holes per 1000 lung pixels at zero severity.
    pub hole_density: f64,
    /// Blob count at zero severity.
    pub calc_count: f64,
    /// Blob radius in pixels at zero severity, at extent 128.
    pub calc_radius: f64,
    /// Blob intensity at zero severity; always clamped to `[300, 1000]`.
    pub calc_hu: f64,
    pub effects: EffectSizes,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            subjects: 180,
            extent: 128,
            depth: 16,
            roi_size: 40,
            noise_hu: 15.0,
            fat_ring: 6.0,
            hole_density: 8.0,
            calc_count: 1.0,
            calc_radius: 1.5,
            calc_hu: 450.0,
            effects: EffectSizes::default(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.subjects == 0 || self.subjects % 2 != 0 {
            return Err(format!("subject count {} must be even and positive", self.subjects));
        }
        if self.extent < 16 {
            return Err(format!("extent {} is below 16", self.extent));
        }
        if self.depth < 3 {
            return Err(format!("depth {} is below 3", self.depth));
        }
        if self.roi_size < 5 || self.roi_size > self.extent {
            return Err(format!("roi size {} does not fit extent {}", self.roi_size, self.extent));
        }
        let e = &self.effects;
        for (name, v) in [
            ("calcification", e.calcification),
            ("emphysema", e.emphysema),
            ("clinical", e.clinical),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("effect size {name} = {v} must be finite and nonnegative"));
            }
        }
        for (name, v) in [
            ("noise_hu", self.noise_hu),
            ("fat_ring", self.fat_ring),
            ("hole_density", self.hole_density),
            ("calc_count", self.calc_count),
            ("calc_radius", self.calc_radius),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Subject `i` is deceased (label 0) for even `i`.
    pub fn label_of(i: usize) -> u8 {
        (i % 2) as u8
    }

    fn roi(&self) -> Roi {
        let e = self.extent as f64;
        let s = self.roi_size;
        let cx = (0.53 * e).round() as isize;
        let cy = (0.56 * e).round() as isize;
        let clamp = |c: isize| (c - s as isize / 2).clamp(0, (self.extent - s) as isize) as usize;
        Roi {
            x: clamp(cx),
            y: clamp(cy),
            w: s,
            h: s,
        }
    }
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, a: f64, b: f64) -> bool {
    let dx = (x - cx) / a;
    let dy = (y - cy) / b;
    dx * dx + dy * dy <= 1.0
}

struct Anatomy {
    base: Vec<f64>,
    lung: Vec<bool>,
}

/// Noise-free cross-section shared by every slice of every subject.
fn anatomy(spec: &PhantomSpec) -> Anatomy {
    let n = spec.extent;
    let e = n as f64;
    let scale = e / 128.0;
    let ring = spec.fat_ring * scale;
    let mut base = vec![AIR_HU; n * n];
    let mut lung = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let idx = y * n + x;
            let (bx, by, ba, bb) = (0.5 * e, 0.5 * e, 0.45 * e, 0.36 * e);
            if !in_ellipse(px, py, bx, by, ba, bb) {
                continue;
            }
            base[idx] = if in_ellipse(px, py, bx, by, ba - ring, bb - ring) {
                SOFT_TISSUE_HU
            } else {
                FAT_HU
            };
            for cx in [0.31 * e, 0.69 * e] {
                if in_ellipse(px, py, cx, 0.47 * e, 0.14 * e, 0.22 * e) {
                    base[idx] = LUNG_HU;
                    lung[idx] = true;
                }
            }
            if in_ellipse(px, py, 0.53 * e, 0.56 * e, 0.12 * e, 0.11 * e) {
                base[idx] = HEART_HU;
                lung[idx] = false;
            }
            if in_ellipse(px, py, 0.5 * e, 0.80 * e, 0.05 * e, 0.05 * e) {
                base[idx] = BONE_HU;
                lung[idx] = false;
            }
        }
    }
    Anatomy { base, lung }
}

/// Disk of planted calcification, in pixel coordinates.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
    hu: f64,
}

fn subject_clinical(rng: &mut ChaCha8Rng, deceased: bool, effect: f64) -> Clinical {
    let shift = if deceased { effect } else { 0.0 };
    let mut z = || -> f64 { rng.sample(StandardNormal) };
    // Per-measurement separations mirror their relative strength as
    // standalone predictors: emphysema is the weakest.
    let cac = (1.2 + 0.9 * (z() + 0.6 * shift)).round().clamp(0.0, 3.0);
    let emph = (5.0 + 2.0 * (z() + 0.2 * shift)).max(0.0);
    let muscle = 50.0 - 6.0 * (z() + 0.55 * shift);
    let fat = -100.0 + 7.0 * (z() + 0.55 * shift);
    let q = |v: f64| (v * 1000.0).round() / 1000.0;
    Clinical {
        cac_risk: cac,
        emphysema_severity: q(emph),
        muscle_mass: q(muscle),
        fat_attenuation: q(fat),
    }
}

fn generate_subject(spec: &PhantomSpec, anatomy: &Anatomy, index: usize) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
    let label = PhantomSpec::label_of(index);
    let deceased = label == 0;
    let n = spec.extent;
    let nz = spec.depth;
    let scale = n as f64 / 128.0;
    let roi = spec.roi();
    let start = rng.random_range(0..=nz - 3);
    let selected = [start, start + 1, start + 2];

    let shift = |e: f64| if deceased { e } else { 0.0 };
    let calc_sev: f64 = rng.sample::<f64, _>(StandardNormal) + shift(spec.effects.calcification);
    let emph_sev: f64 = rng.sample::<f64, _>(StandardNormal) + shift(spec.effects.emphysema);

    let count = (spec.calc_count + calc_sev).round().clamp(0.0, 4.0) as usize;
    let radius = (spec.calc_radius * scale * (1.0 + 0.35 * calc_sev.max(0.0))).max(0.6);
    let hu = (spec.calc_hu + 150.0 * calc_sev).clamp(300.0, 1000.0);
    let (rcx, rcy) = (
        roi.x as f64 + roi.w as f64 / 2.0,
        roi.y as f64 + roi.h as f64 / 2.0,
    );
    let spread = 0.22 * roi.w as f64;
    let blobs: Vec<Blob> = (0..count)
        .map(|_| Blob {
            cx: rcx + rng.random_range(-spread..spread),
            cy: rcy + rng.random_range(-spread..spread),
            r: radius,
            hu,
        })
        .collect();

    let density = spec.hole_density / 1000.0 * (0.5 * emph_sev).exp();
    let hole_r = (1.0 * scale).max(0.75);
    let noise = Normal::new(0.0, spec.noise_hu.max(0.0)).expect("finite std");
    let ana = anatomy;

    let mut voxels = vec![0i16; n * n * nz];
    let mut plane = vec![0.0f64; n * n];
    for z in 0..nz {
        plane.copy_from_slice(&ana.base);
        let holes: Vec<(f64, f64)> = (0..n * n)
            .filter(|&i| ana.lung[i])
            .filter_map(|i| {
                rng.random_bool(density.min(1.0))
                    .then(|| ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5))
            })
            .collect();
        stamp(&mut plane, n, &holes, hole_r, |v, lung| if lung { EMPHYSEMA_HU } else { v }, &ana.lung);
        for v in plane.iter_mut() {
            *v += noise.sample(&mut rng);
        }
        if selected.contains(&z) {
            for b in &blobs {
                for_disk(n, b.cx, b.cy, b.r, |i| {
                    plane[i] = (b.hu + noise.sample(&mut rng)).clamp(300.0, 1000.0);
                });
            }
        }
        let out = &mut voxels[z * n * n..(z + 1) * n * n];
        for (o, &v) in out.iter_mut().zip(plane.iter()) {
            *o = v.round().clamp(-1024.0, 3071.0) as i16;
        }
    }

    let meta = VolumeMeta {
        subject_id: format!("S{index:04}"),
        dims: [n, n, nz],
        label,
        selected_slices: selected,
        roi,
        clinical: subject_clinical(&mut rng, deceased, spec.effects.clinical),
    };
    Volume::new(meta, voxels).expect("generator respects metadata invariants")
}

fn for_disk(n: usize, cx: f64, cy: f64, r: f64, mut f: impl FnMut(usize)) {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(n);
    let y1 = ((cy + r).ceil() as usize).min(n);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                f(y * n + x);
            }
        }
    }
}

fn stamp(
    plane: &mut [f64],
    n: usize,
    centers: &[(f64, f64)],
    r: f64,
    f: impl Fn(f64, bool) -> f64,
    mask: &[bool],
) {
    for &(cx, cy) in centers {
        for_disk(n, cx, cy, r, |i| plane[i] = f(plane[i], mask[i]));
    }
}

/// Generates every subject in parallel; output order is by subject index.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<Volume>, String> {
    spec.validate()?;
    let ana = anatomy(spec);
    Ok((0..spec.subjects)
        .into_par_iter()
        .map(|i| generate_subject(spec, &ana, i))
        .collect())
}

/// Pixels of the ROI on slice `z` at or above the calcification threshold,
/// row-major over the ROI.
pub fn calcification_mask(volume: &Volume, z: usize) -> Vec<bool> {
    let roi = volume.meta.roi;
    let mut mask = Vec::with_capacity(roi.w * roi.h);
    for y in roi.y..roi.y + roi.h {
        for x in roi.x..roi.x + roi.w {
            mask.push(f64::from(volume.voxel(x, y, z)) >= crate::coding::CALCIFICATION_TOP);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coding::encode_value;

    fn small() -> PhantomSpec {
        PhantomSpec {
            subjects: 8,
            extent: 48,
            depth: 5,
            roi_size: 16,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_phantoms(&small()).unwrap();
        let b = generate_phantoms(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 8;
        assert_ne!(generate_phantoms(&other).unwrap(), a);
    }

    #[test]
    fn labels_are_balanced() {
        let vols = generate_phantoms(&small()).unwrap();
        let deceased = vols.iter().filter(|v| v.meta.label == 0).count();
        assert_eq!(deceased, 4);
    }

    #[test]
    fn planted_calcification_is_in_range_and_saturates_ch1() {
        let mut spec = small();
        spec.effects.calcification = 4.0;
        let vols = generate_phantoms(&spec).unwrap();
        let mut seen = 0;
        for v in &vols {
            for &z in &v.meta.selected_slices {
                let mask = calcification_mask(v, z);
                let roi = v.meta.roi;
                for (k, &m) in mask.iter().enumerate() {
                    if m {
                        let hu = v.voxel(roi.x + k % roi.w, roi.y + k / roi.w, z);
                        assert!((300..=1000).contains(&hu), "{hu}");
                        assert_eq!(encode_value(hu as f64), [0, 255, 0]);
                        seen += 1;
                    }
                }
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn calcification_only_on_selected_slices_and_inside_roi() {
        let mut spec = small();
        spec.effects.calcification = 4.0;
        for v in generate_phantoms(&spec).unwrap() {
            let roi = v.meta.roi;
            for z in 0..spec.depth {
                let s = v.slice(z);
                let hot_in_roi = (0..s.len()).filter(|&i| {
                    let (x, y) = (i % spec.extent, i / spec.extent);
                    s[i] >= 300
                        && (roi.x..roi.x + roi.w).contains(&x)
                        && (roi.y..roi.y + roi.h).contains(&y)
                });
                if !v.meta.selected_slices.contains(&z) {
                    assert_eq!(hot_in_roi.count(), 0);
                }
            }
        }
    }

    #[test]
    fn roi_contains_all_three_tissue_channels() {
        let vols = generate_phantoms(&small()).unwrap();
        let v = &vols[1];
        let roi = v.meta.roi;
        let z = v.meta.selected_slices[0];
        let mut owners = [false; 3];
        for y in roi.y..roi.y + roi.h {
            for x in roi.x..roi.x + roi.w {
                let c = encode_value(v.voxel(x, y, z) as f64);
                for k in 0..3 {
                    owners[k] |= c[k] > 0;
                }
            }
        }
        assert_eq!(owners, [true, true, true]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = small();
        s.subjects = 7;
        assert!(s.validate().is_err());
        let mut s = small();
        s.effects.emphysema = -0.1;
        assert!(s.validate().is_err());
    }
}
