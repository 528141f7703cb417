//! `KVOL v1` volumes and their JSON sidecars.
//!
//! The binary file holds the magic `KVOL0001` followed by little-endian
//! `i16` voxels, x fastest, then y, then z. Everything else lives in the
//! sidecar `<name>.json` next to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::VolumeError;

pub const MAGIC: &[u8; 8] = b"KVOL0001";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// The four clinical measurements, in CSV column order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clinical {
    /// Ordinal 0..=3.
    pub cac_risk: f64,
    pub emphysema_severity: f64,
    pub muscle_mass: f64,
    pub fat_attenuation: f64,
}

impl Clinical {
    pub const NAMES: [&'static str; 4] = [
        "cac_risk",
        "emphysema_severity",
        "muscle_mass",
        "fat_attenuation",
    ];

    pub fn to_array(&self) -> [f64; 4] {
        [
            self.cac_risk,
            self.emphysema_severity,
            self.muscle_mass,
            self.fat_attenuation,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub subject_id: String,
    /// `[nx, ny, nz]`
    pub dims: [usize; 3],
    /// 0 = deceased, 1 = survived.
    pub label: u8,
    pub selected_slices: [usize; 3],
    pub roi: Roi,
    pub clinical: Clinical,
}

impl VolumeMeta {
    pub fn validate(&self) -> Result<(), VolumeError> {
        let bad = |m: String| Err(VolumeError::Metadata(m));
        let [nx, ny, nz] = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return bad(format!("dims {:?} must be positive", self.dims));
        }
        if nx.checked_mul(ny).and_then(|v| v.checked_mul(nz)).is_none() {
            return bad(format!("dims {:?} overflow", self.dims));
        }
        if self.label > 1 {
            return bad(format!("label {} is not 0 or 1", self.label));
        }
        let s = self.selected_slices;
        if s[1] != s[0] + 1 || s[2] != s[1] + 1 {
            return bad(format!("selected slices {s:?} are not consecutive"));
        }
        if s[2] >= nz {
            return bad(format!("selected slices {s:?} exceed depth {nz}"));
        }
        let r = self.roi;
        if r.w == 0 || r.h == 0 || r.x + r.w > nx || r.y + r.h > ny {
            return bad(format!("roi {r:?} is not inside {nx}x{ny}"));
        }
        if self.clinical.to_array().iter().any(|v| !v.is_finite()) {
            return bad("clinical measurements must be finite".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, VolumeError> {
        let meta: VolumeMeta = serde_json::from_str(text)?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metadata serializes")
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub meta: VolumeMeta,
    voxels: Vec<i16>,
}

impl Volume {
    pub fn new(meta: VolumeMeta, voxels: Vec<i16>) -> Result<Self, VolumeError> {
        meta.validate()?;
        if voxels.len() != meta.voxel_count() {
            return Err(VolumeError::ExtentMismatch {
                dims: meta.dims,
                expected: meta.voxel_count(),
                found: voxels.len(),
            });
        }
        Ok(Self { meta, voxels })
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn voxel(&self, x: usize, y: usize, z: usize) -> i16 {
        let [nx, ny, _] = self.meta.dims;
        self.voxels[(z * ny + y) * nx + x]
    }

    /// Row-major `nx x ny` plane at depth `z`.
    pub fn slice(&self, z: usize) -> &[i16] {
        let [nx, ny, _] = self.meta.dims;
        &self.voxels[z * nx * ny..(z + 1) * nx * ny]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MAGIC.len() + 2 * self.voxels.len());
        out.extend_from_slice(MAGIC);
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the binary file against its (already parsed) sidecar.
    ///
    /// A payload that does not end on a whole slice is reported as truncated;
    /// one made of whole slices but disagreeing with the sidecar depth is an
    /// extent mismatch.
    pub fn decode(bytes: &[u8], meta: VolumeMeta) -> Result<Self, VolumeError> {
        meta.validate()?;
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(VolumeError::BadMagic);
        }
        let payload = &bytes[MAGIC.len()..];
        let [nx, ny, _] = meta.dims;
        let slice_bytes = 2 * nx * ny;
        if payload.len() % slice_bytes != 0 {
            return Err(VolumeError::TruncatedPayload(format!(
                "{} payload bytes is not a whole number of {nx}x{ny} slices",
                payload.len()
            )));
        }
        let found = payload.len() / 2;
        if found != meta.voxel_count() {
            return Err(VolumeError::ExtentMismatch {
                dims: meta.dims,
                expected: meta.voxel_count(),
                found,
            });
        }
        let voxels = payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        Ok(Self { meta, voxels })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<(), VolumeError> {
    crate::report::write_atomic(path, &volume.encode()).map_err(io(path))?;
    let side = sidecar_path(path);
    crate::report::write_atomic(&side, volume.meta.to_json().as_bytes()).map_err(io(&side))?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume, VolumeError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io(&side))?;
    let meta = VolumeMeta::from_json(&text)?;
    let bytes = fs::read(path).map_err(io(path))?;
    Volume::decode(&bytes, meta)
}

#[derive(Debug, Serialize, Deserialize)]
struct ClinicalRow {
    subject_id: String,
    cac_risk: f64,
    emphysema_severity: f64,
    muscle_mass: f64,
    fat_attenuation: f64,
    label: u8,
}

/// One row per subject: `subject_id, cac_risk, emphysema_severity,
/// muscle_mass, fat_attenuation, label`.
pub fn write_clinical_csv(volumes: &[Volume]) -> Result<Vec<u8>, VolumeError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for v in volumes {
        let c = v.meta.clinical;
        w.serialize(ClinicalRow {
            subject_id: v.meta.subject_id.clone(),
            cac_risk: c.cac_risk,
            emphysema_severity: c.emphysema_severity,
            muscle_mass: c.muscle_mass,
            fat_attenuation: c.fat_attenuation,
            label: v.meta.label,
        })?;
    }
    w.into_inner()
        .map_err(|e| VolumeError::Metadata(e.to_string()))
}

pub fn read_clinical_csv(bytes: &[u8]) -> Result<Vec<(String, Clinical, u8)>, VolumeError> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for row in r.deserialize::<ClinicalRow>() {
        let row = row?;
        if row.label > 1 {
            return Err(VolumeError::Metadata(format!(
                "subject {}: label {} is not 0 or 1",
                row.subject_id, row.label
            )));
        }
        let clinical = Clinical {
            cac_risk: row.cac_risk,
            emphysema_severity: row.emphysema_severity,
            muscle_mass: row.muscle_mass,
            fat_attenuation: row.fat_attenuation,
        };
        if clinical.to_array().iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::Metadata(format!(
                "subject {}: non-finite measurement",
                row.subject_id
            )));
        }
        out.push((row.subject_id, clinical, row.label));
    }
    Ok(out)
}
