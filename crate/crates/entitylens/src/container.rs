//! Shared tensor container: a JSON manifest next to a raw little-endian f32
//! blob. Model and SAE checkpoints both use it.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONTAINER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

impl TensorEntry {
    pub fn f32(name: String, shape: Vec<usize>, offset_elems: usize) -> TensorEntry {
        let len = shape.iter().product();
        TensorEntry {
            name,
            shape,
            dtype: "f32".to_string(),
            offset: offset_elems * 4,
            len,
        }
    }
}

pub fn write_f32_blob(path: &Path, data: &[f32]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for &x in data {
        file.write_all(&x.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_f32_blob(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::ShapeMismatch {
            what: format!("blob {}", path.display()),
            expected: format!("{} bytes", expected_len * 4),
            got: format!("{} bytes", bytes.len()),
        });
    }
    let mut data = Vec::with_capacity(expected_len);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok(data)
}
