//! Dataset manifests: a CSV with `subject_id,image_path,mask_path,split`.
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zoomseg_core::train::{Dataset, Sample};

use crate::nifti::{self, NiftiError};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("subject id {0} appears more than once")]
    DuplicateId(String),
    #[error("subject {id}: {path} does not exist")]
    MissingFile { id: String, path: PathBuf },
    #[error("subject {id}: image and mask grids differ")]
    GridMismatch { id: String },
    #[error("subject {id}: {source}")]
    Nifti { id: String, source: NiftiError },
}

type Result<T> = std::result::Result<T, ManifestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub subject_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Records with paths resolved against the manifest directory.
    pub records: Vec<Record>,
}

impl Manifest {
    /// Parses and validates; every referenced file must exist.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let csv_err = |source| ManifestError::Csv { path: path.to_path_buf(), source };
        let base = path.parent().unwrap_or(Path::new(""));
        let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for row in reader.deserialize() {
            let mut r: Record = row.map_err(csv_err)?;
            if !ids.insert(r.subject_id.clone()) {
                return Err(ManifestError::DuplicateId(r.subject_id));
            }
            r.image_path = base.join(&r.image_path);
            r.mask_path = base.join(&r.mask_path);
            for p in [&r.image_path, &r.mask_path] {
                if !p.is_file() {
                    return Err(ManifestError::MissingFile { id: r.subject_id.clone(), path: p.clone() });
                }
            }
            records.push(r);
        }
        Ok(Self { records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Reads every scan and mask into memory.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let load = |split| self.split(split).map(load_sample).collect::<Result<Vec<_>>>();
        Ok(Dataset { train: load(Split::Train)?, dev: load(Split::Dev)?, test: load(Split::Test)? })
    }
}

pub fn load_sample(r: &Record) -> Result<Sample> {
    let wrap = |source| ManifestError::Nifti { id: r.subject_id.clone(), source };
    let image = nifti::read_volume(&r.image_path).map_err(wrap)?;
    let mask = nifti::read_mask(&r.mask_path).map_err(wrap)?;
    if image.extents() != mask.extents() || image.spacing() != mask.spacing() {
        return Err(ManifestError::GridMismatch { id: r.subject_id.clone() });
    }
    Ok(Sample { subject_id: r.subject_id.clone(), image, mask })
}

/// Writes records verbatim; paths should be relative to `path`'s directory.
pub fn write(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ManifestError::Io { path: dir.to_path_buf(), source })?;
    }
    let csv_err = |source| ManifestError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ManifestError::Io { path: path.to_path_buf(), source })
}
