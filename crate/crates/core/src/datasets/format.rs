//! On-disk corpus format.
//!
//! Every slice is a raw little-endian `f32` array (`<stem>.f32`) with a text sidecar
//! (`<stem>.hdr`):
//!
//! ```text
//! ASL2PET-SLICE v1
//! subject 3
//! modality asl
//! dims 64 64
//! dtype f32le
//! range 0.000000000 0.912345678
//! sha256 <hex digest of the raw file>
//! ```
//!
//! `range` holds the per-volume minimum and maximum used for normalisation. The manifest is
//! JSON lines: a header record followed by one record per subject.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetError, Modality, Slice};

pub const SLICE_MAGIC: &str = "ASL2PET-SLICE v1";
pub const MANIFEST_FORMAT: &str = "ASL2PET-MANIFEST";
pub const MANIFEST_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceFile {
    /// Raw data path relative to the manifest directory.
    pub data: String,
    pub header: String,
    pub sha256: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: u64,
    pub paired: bool,
    /// Carries a local activation hotspot (the "activated" evaluation condition).
    pub activated: bool,
    pub asl: SliceFile,
    pub t1: SliceFile,
    pub pet: Option<SliceFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub base_seed: u64,
    pub height: usize,
    pub width: usize,
    pub subjects: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_jsonl()).map_err(|e| DatasetError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let file = fs::File::open(path).map_err(|e| missing_or_io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| DatasetError::Malformed {
                file: path.display().to_string(),
                reason: "empty manifest".into(),
            })?
            .map_err(|e| DatasetError::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| DatasetError::Malformed {
            file: path.display().to_string(),
            reason: format!("header: {e}"),
        })?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(DatasetError::VersionMismatch {
                file: path.display().to_string(),
                found: format!("{} v{}", header.format, header.version),
            });
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| DatasetError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                file: path.display().to_string(),
                reason: format!("line {}: {e}", i + 2),
            })?);
        }
        if entries.len() != header.subjects {
            return Err(DatasetError::Malformed {
                file: path.display().to_string(),
                reason: format!("header announces {} subjects, found {}", header.subjects, entries.len()),
            });
        }
        Ok(Self { header, entries })
    }
}

fn missing_or_io(path: &Path, e: std::io::Error) -> DatasetError {
    if e.kind() == std::io::ErrorKind::NotFound {
        DatasetError::MissingFile(path.display().to_string())
    } else {
        DatasetError::io(path, e)
    }
}

/// Write a slice and its sidecar into `dir`; returns the manifest record.
pub fn write_slice(dir: &Path, stem: &str, slice: &Slice) -> Result<SliceFile, DatasetError> {
    let bytes = slice.to_le_bytes();
    let digest = sha256_hex(&bytes);
    let (lo, hi) = slice.min_max();
    let (lo, hi) = (f64::from(lo), if hi > lo { f64::from(hi) } else { f64::from(lo) + 1.0 });
    let data_name = format!("{stem}.f32");
    let header_name = format!("{stem}.hdr");
    let data_path = dir.join(&data_name);
    fs::write(&data_path, &bytes).map_err(|e| DatasetError::io(&data_path, e))?;
    let header = format!(
        "{SLICE_MAGIC}\nsubject {}\nmodality {}\ndims {} {}\ndtype f32le\nrange {:.9} {:.9}\nsha256 {}\n",
        slice.subject_id, slice.modality, slice.height, slice.width, lo, hi, digest
    );
    let header_path = dir.join(&header_name);
    let mut f = fs::File::create(&header_path).map_err(|e| DatasetError::io(&header_path, e))?;
    f.write_all(header.as_bytes()).map_err(|e| DatasetError::io(&header_path, e))?;
    Ok(SliceFile {
        data: data_name,
        header: header_name,
        sha256: digest,
        lo,
        hi,
    })
}

#[derive(Debug)]
struct SliceHeader {
    subject: u64,
    modality: Modality,
    height: usize,
    width: usize,
    sha256: String,
}

fn parse_header(path: &Path) -> Result<SliceHeader, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
    let file = path.display().to_string();
    let malformed = |reason: String| DatasetError::Malformed {
        file: file.clone(),
        reason,
    };
    let mut lines = text.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != SLICE_MAGIC {
        return Err(DatasetError::VersionMismatch {
            file: file.clone(),
            found: magic.to_string(),
        });
    }
    let (mut subject, mut modality, mut dims, mut sha) = (None, None, None, None);
    for line in lines {
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.collect::<Vec<_>>().as_slice()) {
            (Some("subject"), [v]) => subject = v.parse().ok(),
            (Some("modality"), [v]) => modality = v.parse().ok(),
            (Some("dims"), [h, w]) => dims = h.parse().ok().zip(w.parse().ok()),
            (Some("dtype"), ["f32le"]) => {}
            (Some("dtype"), other) => return Err(malformed(format!("unsupported dtype {other:?}"))),
            (Some("range"), [_, _]) => {}
            (Some("sha256"), [v]) => sha = Some(v.to_string()),
            (None, _) => {}
            (Some(key), _) => return Err(malformed(format!("unexpected line {key:?}"))),
        }
    }
    let (height, width) = dims.ok_or_else(|| malformed("missing dims".into()))?;
    Ok(SliceHeader {
        subject: subject.ok_or_else(|| malformed("missing subject".into()))?,
        modality: modality.ok_or_else(|| malformed("missing modality".into()))?,
        height,
        width,
        sha256: sha.ok_or_else(|| malformed("missing sha256".into()))?,
    })
}

/// Read a slice, verifying its checksum against both the manifest and the sidecar.
pub fn read_slice(dir: &Path, entry: &SliceFile, subject: u64, modality: Modality) -> Result<Slice, DatasetError> {
    let header_path: PathBuf = dir.join(&entry.header);
    let data_path: PathBuf = dir.join(&entry.data);
    let header = parse_header(&header_path)?;
    let bytes = fs::read(&data_path).map_err(|e| missing_or_io(&data_path, e))?;
    let digest = sha256_hex(&bytes);
    if digest != entry.sha256 || digest != header.sha256 {
        return Err(DatasetError::ChecksumMismatch(data_path.display().to_string()));
    }
    if header.subject != subject || header.modality != modality {
        return Err(DatasetError::Malformed {
            file: header_path.display().to_string(),
            reason: format!(
                "expected subject {subject} {modality}, header says subject {} {}",
                header.subject, header.modality
            ),
        });
    }
    if bytes.len() != header.height * header.width * 4 {
        return Err(DatasetError::Malformed {
            file: data_path.display().to_string(),
            reason: format!("{} bytes for {}x{} floats", bytes.len(), header.height, header.width),
        });
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Slice::new(pixels, header.height, header.width, modality, subject))
}
