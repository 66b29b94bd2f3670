//! Versioned, checksummed binary checkpoints.
//!
//! Layout: magic "DRCK", u32 version, u8 precision, five u32 dims, the
//! vocabulary characters as length-prefixed UTF-8, then every weight
//! array in ModelParams' documented flat order as a u64 count plus raw
//! little-endian values, and finally a SHA-256 digest of all preceding
//! bytes. Round-trips are bit-exact at the stored precision.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;

use super::params::{ModelDims, ModelParams};

const MAGIC: &[u8; 4] = b"DRCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Self::F64 => 0,
            Self::F32 => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Self::F64),
            1 => Some(Self::F32),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic,
    VersionMismatch { found: u32, expected: u32 },
    ChecksumMismatch,
    Truncated,
    BadField(&'static str),
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            Self::VersionMismatch { found, expected } => {
                write!(f, "checkpoint version {found}, expected {expected}")
            }
            Self::ChecksumMismatch => write!(f, "checkpoint checksum mismatch (corrupted file)"),
            Self::Truncated => write!(f, "checkpoint file is truncated"),
            Self::BadField(which) => write!(f, "invalid checkpoint field: {which}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// Serializes params and vocabulary at the requested storage precision.
pub fn save_checkpoint(
    params: &ModelParams,
    vocab: &Vocabulary,
    precision: Precision,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(precision.tag());
    let d = params.dims;
    for dim in [d.vocab, d.d_model, d.layers, d.heads, d.max_pos] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    let chars: String = vocab.chars().iter().collect();
    let bytes = chars.as_bytes();
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);

    params.visit(|arr| {
        buf.extend_from_slice(&(arr.len() as u64).to_le_bytes());
        match precision {
            Precision::F64 => {
                for &v in arr {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Precision::F32 => {
                for &v in arr {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    });

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

/// Loads params and vocabulary, verifying version and checksum. Values
/// stored at f32 are widened back to f64.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Vocabulary), CheckpointError> {
    let buf = fs::read(path)?;
    if buf.len() < 32 {
        return Err(CheckpointError::Truncated);
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let precision =
        Precision::from_tag(r.u8()?).ok_or(CheckpointError::BadField("precision"))?;
    let dims = ModelDims::new(
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
    );
    let chars_len = r.u32()? as usize;
    let chars = std::str::from_utf8(r.take(chars_len)?)
        .map_err(|_| CheckpointError::BadField("vocabulary"))?;
    let vocab = Vocabulary::from_chars(chars.chars().collect());

    let mut params =
        ModelParams::zeros(dims).map_err(|_| CheckpointError::BadField("dims"))?;
    let mut failed = None;
    params.visit_mut(|arr| {
        if failed.is_some() {
            return;
        }
        if let Err(e) = r.fill(arr, precision) {
            failed = Some(e);
        }
    });
    if let Some(e) = failed {
        return Err(e);
    }
    if r.pos != body.len() {
        return Err(CheckpointError::BadField("trailing bytes"));
    }
    Ok((params, vocab))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fill(&mut self, arr: &mut [f64], precision: Precision) -> Result<(), CheckpointError> {
        let count = self.u64()? as usize;
        if count != arr.len() {
            return Err(CheckpointError::BadField("array length"));
        }
        match precision {
            Precision::F64 => {
                let bytes = self.take(count * 8)?;
                for (i, v) in arr.iter_mut().enumerate() {
                    *v = f64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap());
                }
            }
            Precision::F32 => {
                let bytes = self.take(count * 4)?;
                for (i, v) in arr.iter_mut().enumerate() {
                    *v = f32::from_le_bytes(bytes[i * 4..(i + 1) * 4].try_into().unwrap()) as f64;
                }
            }
        }
        Ok(())
    }
}
