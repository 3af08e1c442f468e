//! Corpus loading, intensity normalisation and the batch queue feeding the trainer.

pub mod format;
mod slice;
mod stream;

pub use format::{Manifest, ManifestEntry, ManifestHeader, SliceFile};
pub use slice::{Modality, Slice};
pub use stream::{batch_stream, BatchPlan, BatchStream, StreamOptions, DEFAULT_QUEUE_DEPTH};

use std::fs;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::nn::Tensor;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("unsupported format in {file}: {found}")]
    VersionMismatch { file: String, found: String },
    #[error("malformed {file}: {reason}")]
    Malformed { file: String, reason: String },
    #[error("degenerate normalisation range [{lo}, {hi}]")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("no {0} subjects available")]
    EmptyPool(Pairing),
    #[error("{pool} {pairing} subjects cannot fill a batch of {batch}")]
    PoolSmallerThanBatch { pairing: Pairing, pool: usize, batch: usize },
    #[error("subject {0} is not in the dataset")]
    UnknownSubject(u64),
    #[error("inconsistent slice dims: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    Paired,
    Unpaired,
}

impl std::fmt::Display for Pairing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pairing::Paired => "paired",
            Pairing::Unpaired => "unpaired",
        })
    }
}

/// `clip((x - lo) / (hi - lo), 0, 1)`.
pub fn normalize(raw: &[f32], lo: f64, hi: f64) -> Result<Vec<f32>, DatasetError> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(DatasetError::DegenerateRange { lo, hi });
    }
    let span = hi - lo;
    Ok(raw
        .iter()
        .map(|&x| ((f64::from(x) - lo) / span).clamp(0.0, 1.0) as f32)
        .collect())
}

/// One subject's normalised slices.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: u64,
    pub activated: bool,
    pub asl: Slice,
    pub t1: Slice,
    pub pet: Option<Slice>,
}

impl Subject {
    pub fn paired(&self) -> bool {
        self.pet.is_some()
    }
}

/// Immutable, cheaply clonable view of a loaded corpus.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    subjects: Arc<Vec<Subject>>,
    paired: Vec<usize>,
    unpaired: Vec<usize>,
    dims: (usize, usize),
    digest: String,
}

impl DatasetHandle {
    pub fn from_subjects(subjects: Vec<Subject>, digest: impl Into<String>) -> Result<Self, DatasetError> {
        let dims = subjects.first().map_or((0, 0), |s| s.asl.dims());
        for s in &subjects {
            let slices = [Some(&s.asl), Some(&s.t1), s.pet.as_ref()];
            if slices.into_iter().flatten().any(|sl| sl.dims() != dims) {
                return Err(DatasetError::ShapeMismatch(format!(
                    "subject {} does not match {}x{}",
                    s.id, dims.0, dims.1
                )));
            }
        }
        let paired = (0..subjects.len()).filter(|&i| subjects[i].paired()).collect();
        let unpaired = (0..subjects.len()).filter(|&i| !subjects[i].paired()).collect();
        Ok(Self {
            subjects: Arc::new(subjects),
            paired,
            unpaired,
            dims,
            digest: digest.into(),
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn paired(&self) -> impl Iterator<Item = &Subject> {
        self.paired.iter().map(|&i| &self.subjects[i])
    }

    pub fn unpaired(&self) -> impl Iterator<Item = &Subject> {
        self.unpaired.iter().map(|&i| &self.subjects[i])
    }

    pub fn pool(&self, pairing: Pairing) -> Vec<&Subject> {
        match pairing {
            Pairing::Paired => self.paired().collect(),
            Pairing::Unpaired => self.unpaired().collect(),
        }
    }

    pub fn counts(&self) -> (usize, usize) {
        (self.paired.len(), self.unpaired.len())
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    /// SHA-256 of the manifest the handle was loaded from.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn subject(&self, id: u64) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// New handle restricted to `ids` (in the given order).
    pub fn subset(&self, ids: &[u64]) -> Result<Self, DatasetError> {
        let subjects = ids
            .iter()
            .map(|&id| self.subject(id).cloned().ok_or(DatasetError::UnknownSubject(id)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_subjects(subjects, self.digest.clone())
    }
}

/// Load every subject listed in a manifest, verifying checksums and normalising each slice
/// with its recorded per-volume range.
pub fn load_manifest(path: &Path) -> Result<DatasetHandle, DatasetError> {
    let manifest = Manifest::read(path)?;
    let digest = format::sha256_hex(&fs::read(path).map_err(|e| DatasetError::io(path, e))?);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let load = |f: &SliceFile, id: u64, m: Modality| -> Result<Slice, DatasetError> {
        let raw = format::read_slice(dir, f, id, m)?;
        let pixels = normalize(&raw.pixels, f.lo, f.hi)?;
        Ok(Slice { pixels, ..raw })
    };
    let subjects = manifest
        .entries
        .iter()
        .map(|e| {
            let pet = match (&e.pet, e.paired) {
                (Some(p), true) => Some(load(p, e.subject_id, Modality::Pet)?),
                (None, false) => None,
                _ => {
                    return Err(DatasetError::Malformed {
                        file: path.display().to_string(),
                        reason: format!("subject {} pairing flag disagrees with its files", e.subject_id),
                    })
                }
            };
            Ok(Subject {
                id: e.subject_id,
                activated: e.activated,
                asl: load(&e.asl, e.subject_id, Modality::Asl)?,
                t1: load(&e.t1, e.subject_id, Modality::T1)?,
                pet,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    DatasetHandle::from_subjects(subjects, digest)
}

/// Stacked slices of `B` subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub asl: Tensor<f32>,
    pub t1: Option<Tensor<f32>>,
    pub pet: Option<Tensor<f32>>,
    pub paired: bool,
    pub subject_ids: Vec<u64>,
}

fn stack(slices: &[&Slice]) -> Tensor<f32> {
    let (h, w) = slices[0].dims();
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        data.extend_from_slice(&s.pixels);
    }
    Tensor::from_vec([slices.len(), 1, h, w], data)
}

impl Batch {
    /// Stack subjects of one pairing class. Panics on an empty or mixed list.
    pub fn from_subjects(subjects: &[&Subject], include_t1: bool) -> Self {
        assert!(!subjects.is_empty(), "batch needs at least one subject");
        let paired = subjects[0].paired();
        assert!(subjects.iter().all(|s| s.paired() == paired), "mixed pairing in one batch");
        let asl: Vec<&Slice> = subjects.iter().map(|s| &s.asl).collect();
        let t1: Vec<&Slice> = subjects.iter().map(|s| &s.t1).collect();
        let pet: Option<Vec<&Slice>> = subjects.iter().map(|s| s.pet.as_ref()).collect();
        Self {
            asl: stack(&asl),
            t1: include_t1.then(|| stack(&t1)),
            pet: pet.map(|p| stack(&p)),
            paired,
            subject_ids: subjects.iter().map(|s| s.id).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subject_ids.is_empty()
    }

    pub fn pairing(&self) -> Pairing {
        if self.paired {
            Pairing::Paired
        } else {
            Pairing::Unpaired
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[0.0, 5.0, 10.0], 0.0, 10.0).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize(&[-1.0, 11.0], 0.0, 10.0).unwrap(), vec![0.0, 1.0]);
        let c = 3.25f32;
        assert_eq!(
            normalize(&[c; 4], f64::from(c) - 1.0, f64::from(c) + 1.0).unwrap(),
            vec![0.5; 4]
        );
    }

    #[test]
    fn normalize_rejects_degenerate_range() {
        assert!(matches!(
            normalize(&[1.0], 2.0, 2.0),
            Err(DatasetError::DegenerateRange { .. })
        ));
        assert!(normalize(&[1.0], 3.0, 2.0).is_err());
    }

    #[test]
    fn empty_handle_has_no_subjects() {
        let h = DatasetHandle::from_subjects(Vec::new(), "").unwrap();
        assert_eq!(h.counts(), (0, 0));
    }
}
