//! Flat named-array checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "KFLC" | version u32 | precision u8 (bytes per value) | count u32
//! then per entry:
//!   name_len u16 | name utf-8 | ndim u8 | dims u32 × ndim | raw values
//! ```
//!
//! Values are raw IEEE bytes at the stored precision, so a round trip is
//! bit-exact.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::scalar::Scalar;
use crate::tensor::Array;

const MAGIC: &[u8; 4] = b"KFLC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic,
    VersionMismatch { found: u32, expected: u32 },
    PrecisionMismatch { found: u8, expected: u8 },
    Truncated(&'static str),
    BadName,
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::BadMagic => write!(f, "not a checkpoint file"),
            CheckpointError::VersionMismatch { found, expected } => {
                write!(f, "checkpoint version {found}, this build reads {expected}")
            }
            CheckpointError::PrecisionMismatch { found, expected } => write!(
                f,
                "checkpoint stores {found}-byte values, expected {expected}-byte"
            ),
            CheckpointError::Truncated(what) => write!(f, "checkpoint truncated at {what}"),
            CheckpointError::BadName => write!(f, "checkpoint entry name is not utf-8"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

pub fn save<S: Scalar>(
    path: &Path,
    entries: &[(String, &Array<S>)],
) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(S::BYTES as u8);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, array) in entries {
        let nb = name.as_bytes();
        assert!(nb.len() <= u16::MAX as usize);
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(array.ndim() as u8);
        for &d in array.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in array.data() {
            v.write_le(&mut buf);
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Vec<(String, Array<S>)>, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize, what: &'static str| -> Result<&[u8], CheckpointError> {
        if *at + n > bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };

    if take(&mut at, 4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(take(&mut at, 4, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let precision = take(&mut at, 1, "precision")?[0];
    if precision as usize != S::BYTES {
        return Err(CheckpointError::PrecisionMismatch {
            found: precision,
            expected: S::BYTES as u8,
        });
    }
    let count = u32::from_le_bytes(take(&mut at, 4, "count")?.try_into().unwrap());

    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(take(&mut at, 2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut at, name_len, "name")?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let ndim = take(&mut at, 1, "ndim")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut at, 4, "dim")?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut at, numel * S::BYTES, "values")?;
        let data: Vec<S> = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
        out.push((name, Array::new(shape, data)));
    }
    Ok(out)
}
