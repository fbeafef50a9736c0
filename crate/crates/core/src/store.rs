//! Little-endian float32 array files with a shape header.
//!
//! Layout: magic `PHPA`, `u32` rank, `rank × u64` dims, then the values.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PHPA";

pub fn encode_array(a: ArrayViewD<'_, f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * a.ndim() + 4 * a.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
    for &d in a.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_array(name: &str, bytes: &[u8]) -> Result<ArrayD<f32>> {
    let corrupt = |reason: String| Error::CorruptArray {
        name: name.to_string(),
        reason,
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing array header".into()));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = 8 + 8 * rank;
    if rank > 16 || bytes.len() < body {
        return Err(corrupt(format!("truncated header for rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| {
            u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize
        })
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt("shape overflows".into()))?;
    let data = &bytes[body..];
    if data.len() != count * 4 {
        return Err(corrupt(format!(
            "shape {shape:?} needs {} bytes of data, found {}",
            count * 4,
            data.len()
        )));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| corrupt(e.to_string()))
}

pub fn write_array(path: &Path, a: ArrayViewD<'_, f32>) -> Result<()> {
    write_atomic(path, &encode_array(a))
}

pub fn read_array(path: &Path, name: &str) -> Result<ArrayD<f32>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::io(format!("reading array {name} from {}", path.display()), e))?;
    decode_array(name, &bytes)
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f =
        fs::File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    f.sync_all()
        .map_err(|e| Error::io(format!("syncing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming into {}", path.display()), e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn round_trip_and_tamper() {
        let a = Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (i * 12 + j * 4 + k) as f32 * 0.5)
            .into_dyn();
        let bytes = encode_array(a.view());
        assert_eq!(decode_array("a", &bytes).unwrap(), a);
        let err = decode_array("a", &bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().contains('a'));
        assert!(decode_array("a", b"nope").is_err());
    }
}
