//! Versioned checkpoint archive.
//!
//! Layout: a magic line, one line of JSON header (model config, its digest, caller-provided
//! counters and the array directory), then every array as little-endian `f64` in directory
//! order. Trainable parameters store their value and both Adam moments.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Network};
use crate::nn::Real;

pub const CHECKPOINT_MAGIC: &str = "ASL2PET-CHECKPOINT v1";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    adam_steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_digest: String,
    counters: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// Metadata restored alongside the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub counters: serde_json::Value,
}

fn err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Write atomically: the archive goes to a sibling temp file that is renamed into place.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    net: &Network<T>,
    counters: &serde_json::Value,
) -> Result<(), ModelError> {
    let params = net.named_params();
    let header = Header {
        config: net.config().clone(),
        config_digest: net.config().digest(),
        counters: counters.clone(),
        arrays: params
            .iter()
            .map(|(_, p)| ArrayEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                trainable: p.trainable,
                adam_steps: p.adam_steps,
            })
            .collect(),
    };
    let mut buf = Vec::new();
    writeln!(buf, "{CHECKPOINT_MAGIC}")?;
    serde_json::to_writer(&mut buf, &header).map_err(|e| err(path, e.to_string()))?;
    buf.push(b'\n');
    for (_, p) in &params {
        let mut arrays = vec![&p.value];
        if p.trainable {
            arrays.push(&p.adam_m);
            arrays.push(&p.adam_v);
        }
        for a in arrays {
            for v in a {
                buf.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint. When `expected` is given, the stored configuration must match it.
pub fn load_checkpoint<T: Real>(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<(Network<T>, Checkpoint), ModelError> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(err(path, format!("unsupported format line {:?}", line.trim_end())));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let header: Header = serde_json::from_str(&line).map_err(|e| err(path, format!("bad header: {e}")))?;
    if header.config.digest() != header.config_digest {
        return Err(err(path, "config digest does not match stored config"));
    }
    if let Some(want) = expected {
        if want.digest() != header.config_digest {
            return Err(err(
                path,
                format!("checkpoint holds {} but {} was requested", header.config.tag(), want.tag()),
            ));
        }
    }
    let mut net = Network::<T>::build(&header.config, 0)?;
    let mut params = net.named_params_mut();
    if params.len() != header.arrays.len() {
        return Err(err(path, "array directory does not match the network"));
    }
    let mut read_array = |len: usize| -> Result<Vec<T>, ModelError> {
        let mut bytes = vec![0u8; len * 8];
        reader.read_exact(&mut bytes).map_err(|e| err(path, format!("truncated data: {e}")))?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    };
    for ((_, p), entry) in params.iter_mut().zip(&header.arrays) {
        if p.name != entry.name || p.shape != entry.shape || p.trainable != entry.trainable {
            return Err(err(path, format!("array {} does not match the network", entry.name)));
        }
        let len = p.len();
        p.value = read_array(len)?;
        if p.trainable {
            p.adam_m = read_array(len)?;
            p.adam_v = read_array(len)?;
            p.adam_steps = entry.adam_steps;
        }
    }
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(err(path, "trailing bytes after array data"));
    }
    Ok((
        net,
        Checkpoint {
            config: header.config,
            counters: header.counters,
        },
    ))
}
