//! `FEAT` files: magic, `u32` frame count, `u32` feature dim, then row-major
//! little-endian `f32` values.

use std::path::Path;

use super::DataError;
use crate::numerics::Tensor;

pub const FEAT_MAGIC: &[u8; 4] = b"FEAT";

pub fn write_feat(path: &Path, features: &Tensor) -> Result<(), DataError> {
    let (rows, cols) = (features.rows(), features.cols());
    let mut buf = Vec::with_capacity(12 + 4 * features.len());
    buf.extend_from_slice(FEAT_MAGIC);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| DataError::io(path, e))
}

pub fn read_feat(path: &Path) -> Result<Tensor, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let bad = |offset: usize, message: String| DataError::Feature {
        path: path.to_path_buf(),
        offset,
        message,
    };
    if bytes.len() < 12 {
        return Err(bad(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != FEAT_MAGIC {
        return Err(bad(0, "bad magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = 12 + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(bad(
            bytes.len().min(expected),
            format!(
                "payload of {} bytes, header implies {}",
                bytes.len() - 12,
                expected - 12
            ),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::matrix(rows, cols, data).expect("length checked"))
}
