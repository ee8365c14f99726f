//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!   magic  b"TPCK"
//!   version u32 (currently 1)
//!   header_len u64, header bytes (JSON: config, variant, vocabulary lines)
//!   array_count u64
//!   per array: name_len u64, name bytes, ndim u64, dims (u64 each),
//!              values (f64 little-endian, row-major)
//!
//! Values are always stored as f64; loading into f32 parameters rounds.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, ModelParameters, PromptVariant};
use crate::num::Scalar;
use crate::tokenizer::{VocabError, Vocabulary};

const MAGIC: &[u8; 4] = b"TPCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint arrays do not match the declared config: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    variant: PromptVariant,
    vocab: String,
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    params: &ModelParameters<F>,
    vocab: &Vocabulary,
) -> Result<(), CheckpointError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        config: params.config,
        variant: params.variant,
        vocab: vocab.to_lines(),
    })?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let names: Vec<String> = params.layout.names().map(str::to_string).collect();
    out.write_all(&(names.len() as u64).to_le_bytes())?;
    for name in &names {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        let shape = params.layout.shape(name);
        out.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &dim in shape {
            out.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &value in params.get(name) {
            out.write_all(&value.to_f64_lossy().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn load_checkpoint<F: Scalar>(
    path: &Path,
) -> Result<(ModelParameters<F>, Vocabulary), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let header_len = read_u64(&mut r)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    let vocab = Vocabulary::from_lines(&header.vocab)?;

    let mut params = ModelParameters::<F>::init(&header.config, header.variant)?;
    let expected: Vec<String> = params.layout.names().map(str::to_string).collect();
    let count = read_u64(&mut r)? as usize;
    if count != expected.len() {
        return Err(CheckpointError::LayoutMismatch(format!(
            "expected {} arrays, found {count}",
            expected.len()
        )));
    }
    for expected_name in &expected {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::LayoutMismatch("non-utf8 array name".into()))?;
        if &name != expected_name {
            return Err(CheckpointError::LayoutMismatch(format!(
                "expected array {expected_name:?}, found {name:?}"
            )));
        }
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        if shape != params.layout.shape(&name) {
            return Err(CheckpointError::LayoutMismatch(format!(
                "array {name:?} has shape {shape:?}, expected {:?}",
                params.layout.shape(&name)
            )));
        }
        let slice = params.get_mut(&name);
        let mut buf = [0u8; 8];
        for value in slice.iter_mut() {
            r.read_exact(&mut buf)?;
            *value = F::from_f64_lossy(f64::from_le_bytes(buf));
        }
    }
    Ok((params, vocab))
}
