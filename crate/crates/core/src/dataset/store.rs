//! Dataset directories: `volumes/<id>.kvol` with sidecars plus `clinical.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::volume::{load_volume, read_clinical_csv, save_volume, write_clinical_csv, Volume};
use crate::error::VolumeError;

pub const VOLUME_DIR: &str = "volumes";
pub const CLINICAL_CSV: &str = "clinical.csv";

pub fn volume_path(dir: &Path, subject_id: &str) -> PathBuf {
    dir.join(VOLUME_DIR).join(format!("{subject_id}.kvol"))
}

pub fn save_dataset(dir: &Path, volumes: &[Volume]) -> Result<(), VolumeError> {
    for v in volumes {
        save_volume(v, &volume_path(dir, &v.meta.subject_id))?;
    }
    let path = dir.join(CLINICAL_CSV);
    crate::report::write_atomic(&path, &write_clinical_csv(volumes)?)
        .map_err(|source| VolumeError::Io { path, source })
}

/// Loads every volume in subject-id order and checks that `clinical.csv`
/// agrees with the sidecars.
pub fn load_dataset(dir: &Path) -> Result<Vec<Volume>, VolumeError> {
    let vdir = dir.join(VOLUME_DIR);
    let entries = fs::read_dir(&vdir).map_err(|source| VolumeError::Io {
        path: vdir.clone(),
        source,
    })?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e
            .map_err(|source| VolumeError::Io {
                path: vdir.clone(),
                source,
            })?
            .path();
        if p.extension().is_some_and(|x| x == "kvol") {
            paths.push(p);
        }
    }
    paths.sort();
    let volumes = paths.iter().map(|p| load_volume(p)).collect::<Result<Vec<_>, _>>()?;
    let csv_path = dir.join(CLINICAL_CSV);
    let bytes = fs::read(&csv_path).map_err(|source| VolumeError::Io {
        path: csv_path,
        source,
    })?;
    let rows = read_clinical_csv(&bytes)?;
    if rows.len() != volumes.len() {
        return Err(VolumeError::Metadata(format!(
            "{CLINICAL_CSV} has {} rows for {} volumes",
            rows.len(),
            volumes.len()
        )));
    }
    for ((id, clinical, label), v) in rows.iter().zip(&volumes) {
        if *id != v.meta.subject_id || *clinical != v.meta.clinical || *label != v.meta.label {
            return Err(VolumeError::Metadata(format!(
                "{CLINICAL_CSV} row for `{id}` disagrees with the sidecar of `{}`",
                v.meta.subject_id
            )));
        }
    }
    Ok(volumes)
}

/// SHA-256 over every volume's sidecar and payload, in subject-id order.
pub fn dataset_hash(volumes: &[Volume]) -> String {
    let mut order: Vec<&Volume> = volumes.iter().collect();
    order.sort_by(|a, b| a.meta.subject_id.cmp(&b.meta.subject_id));
    let mut h = Sha256::new();
    for v in order {
        let meta = v.meta.to_json();
        let payload = v.encode();
        for part in [meta.as_bytes(), &payload] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
    }
    hex::encode(h.finalize())
}
