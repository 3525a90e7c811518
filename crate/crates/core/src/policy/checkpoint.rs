//! Versioned binary checkpoints: magic, JSON header (architecture +
//! tokenizer identifier), then the flat parameter vector as little-endian
//! `f64`. Writes are byte-deterministic for identical models — no
//! timestamps, no environment fingerprints — so seeded runs can be compared
//! with a plain file hash.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::model::{ArchConfig, PolicyModel};
use crate::policy::tokenizer::TOKENIZER_ID;

const MAGIC: &[u8; 8] = b"GRLCKPT\x01";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    tokenizer: String,
    arch: ArchConfig,
    param_count: usize,
}

pub fn save_checkpoint(model: &PolicyModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        version: VERSION,
        tokenizer: TOKENIZER_ID.to_string(),
        arch: *model.arch(),
        param_count: model.param_count(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(MAGIC).map_err(|e| Error::io_at(path, e))?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| Error::io_at(path, e))?;
    w.write_all(&header_bytes).map_err(|e| Error::io_at(path, e))?;
    for &v in model.params() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io_at(path, e))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyModel> {
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(|_| bad("truncated header length"))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 1 << 20 {
        return Err(bad("implausible header length"));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| bad(&format!("malformed header: {e}")))?;
    if header.version != VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    if header.tokenizer != TOKENIZER_ID {
        return Err(bad(&format!(
            "tokenizer mismatch: file has {:?}, this build uses {TOKENIZER_ID:?}",
            header.tokenizer
        )));
    }
    header.arch.validate()?;
    if header.param_count != header.arch.param_count() {
        return Err(bad(&format!(
            "header claims {} parameters but the architecture needs {}",
            header.param_count,
            header.arch.param_count()
        )));
    }
    let mut params = vec![0.0f64; header.param_count];
    let mut buf = [0u8; 8];
    for (i, v) in params.iter_mut().enumerate() {
        r.read_exact(&mut buf)
            .map_err(|_| bad(&format!("truncated parameters at entry {i}")))?;
        *v = f64::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(bad(&format!("non-finite parameter at entry {i}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io_at(path, e))? != 0 {
        return Err(bad("trailing bytes after parameters"));
    }
    PolicyModel::from_params(header.arch, params)
}
