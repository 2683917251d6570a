//! Flat binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "PTXMODEL"
//! version     u32
//! config      u32 length + UTF-8 JSON
//! scalars     u32 count, then per entry: u16 name length + name, u64 value
//! arrays      u32 count, then per entry: u16 name length + name,
//!             u8 rank, u32 dims…, f64 data (row-major)
//! ```
//!
//! Floats are stored by bit pattern, so a write/read cycle reproduces every
//! parameter exactly — required for bitwise-identical training resumption.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"PTXMODEL";
pub const VERSION: u32 = 1;

/// Keeps pathological headers from allocating unbounded buffers.
const MAX_NAME: usize = 1 << 12;
const MAX_CONFIG: usize = 1 << 24;
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// A named shaped array of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn from_tensor(t: &Tensor) -> Array {
        Array { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }

    pub fn into_tensor(self) -> Tensor {
        Tensor::from_vec(self.shape, self.data)
    }
}

/// Everything a resumable run needs: a JSON configuration header, named
/// integer scalars (step counter, generator state words), and named float
/// arrays (model parameters, prototype bank rows, optimizer moments).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config_json: String,
    pub scalars: BTreeMap<String, u64>,
    pub arrays: BTreeMap<String, Array>,
}

impl Checkpoint {
    /// Copies every parameter in `params` under a `{namespace}.` prefix.
    pub fn put_params(&mut self, namespace: &str, params: &ParamSet) {
        for (name, tensor) in params.iter() {
            self.arrays.insert(format!("{namespace}.{name}"), Array::from_tensor(tensor));
        }
    }

    /// Extracts the arrays under a `{namespace}.` prefix back into a set.
    pub fn take_params(&self, namespace: &str) -> Result<ParamSet, CheckpointError> {
        let prefix = format!("{namespace}.");
        let mut set = ParamSet::new();
        for (name, array) in &self.arrays {
            if let Some(stripped) = name.strip_prefix(&prefix) {
                set.insert(stripped, array.clone().into_tensor());
            }
        }
        if set.is_empty() {
            return Err(CheckpointError::Corrupt(format!("no arrays under {prefix}")));
        }
        Ok(set)
    }

    pub fn scalar(&self, name: &str) -> Result<u64, CheckpointError> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing scalar {name}")))
    }

    pub fn array(&self, name: &str) -> Result<&Array, CheckpointError> {
        self.arrays
            .get(name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing array {name}")))
    }

    pub fn write_to(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.encode(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let checkpoint = Checkpoint::decode(&mut r)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes after arrays".to_owned()));
        }
        Ok(checkpoint)
    }

    fn encode<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let config = self.config_json.as_bytes();
        w.write_all(&(config.len() as u32).to_le_bytes())?;
        w.write_all(config)?;
        w.write_all(&(self.scalars.len() as u32).to_le_bytes())?;
        for (name, &value) in &self.scalars {
            write_name(w, name)?;
            w.write_all(&value.to_le_bytes())?;
        }
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, array) in &self.arrays {
            let elements: usize = array.shape.iter().product();
            if elements != array.data.len() {
                return Err(CheckpointError::Corrupt(format!(
                    "array {name} shape {:?} does not cover {} values",
                    array.shape,
                    array.data.len()
                )));
            }
            write_name(w, name)?;
            w.write_all(&[array.shape.len() as u8])?;
            for &dim in &array.shape {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for &value in &array.data {
                w.write_all(&value.to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn decode<R: Read>(r: &mut R) -> Result<Checkpoint, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let config_len = read_u32(r)? as usize;
        if config_len > MAX_CONFIG {
            return Err(CheckpointError::Corrupt(format!("config length {config_len}")));
        }
        let mut config = vec![0u8; config_len];
        r.read_exact(&mut config)?;
        let config_json = String::from_utf8(config)
            .map_err(|_| CheckpointError::Corrupt("config is not UTF-8".to_owned()))?;

        let mut scalars = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let name = read_name(r)?;
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            scalars.insert(name, u64::from_le_bytes(buf));
        }

        let mut arrays = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let name = read_name(r)?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u32(r)? as usize);
            }
            let elements: usize = shape.iter().product();
            if elements > MAX_ELEMENTS {
                return Err(CheckpointError::Corrupt(format!(
                    "array {name} claims {elements} elements"
                )));
            }
            let mut data = Vec::with_capacity(elements);
            let mut buf = [0u8; 8];
            for _ in 0..elements {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            arrays.insert(name, Array { shape, data });
        }
        Ok(Checkpoint { config_json, scalars, arrays })
    }
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<(), CheckpointError> {
    let bytes = name.as_bytes();
    if bytes.len() > MAX_NAME {
        return Err(CheckpointError::Corrupt(format!("name of {} bytes", bytes.len())));
    }
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let len = u16::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Corrupt("name is not UTF-8".to_owned()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
