//! Single-file archive used by detector checkpoints and knowledge packets.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size             content
//! 0       8                magic b"DRDARCH1"
//! 8       4                u32 manifest length L
//! 12      L                manifest (UTF-8 JSON)
//! 12+L    P                payload: raw tensor blobs, f32 little-endian,
//!                          row-major, concatenated in manifest order
//! 12+L+P  32               SHA-256 over bytes [0, 12+L+P)
//! ```
//!
//! Readers must reject files with a bad magic, a truncated body, or a
//! checksum mismatch before interpreting the manifest.

use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"DRDARCH1";
pub const CHECKSUM_LEN: usize = 32;

pub fn write_archive(path: &Path, manifest: &[u8], payload: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + manifest.len() + payload.len() + CHECKSUM_LEN);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    bytes.extend_from_slice(manifest);
    bytes.extend_from_slice(payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 + CHECKSUM_LEN {
        return Err(Error::Format(format!(
            "{}: too short ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let body_len = bytes.len() - CHECKSUM_LEN;
    let stored = &bytes[body_len..];
    let computed = Sha256::digest(&bytes[..body_len]);
    if stored != computed.as_slice() {
        return Err(Error::Checksum(format!(
            "{}: stored {} != computed {}",
            path.display(),
            hex::encode(stored),
            hex::encode(computed)
        )));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if 12 + mlen > body_len {
        return Err(Error::Format(format!(
            "{}: manifest length {} exceeds body",
            path.display(),
            mlen
        )));
    }
    let manifest = bytes[12..12 + mlen].to_vec();
    let payload = bytes[12 + mlen..body_len].to_vec();
    Ok((manifest, payload))
}

/// Append one tensor to a payload buffer as little-endian f32.
pub fn pack_tensor(payload: &mut Vec<u8>, data: &ArrayD<f64>) {
    for &v in data.iter() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Read one tensor of the given shape from the payload at `*offset`,
/// advancing the offset.
pub fn unpack_tensor(payload: &[u8], offset: &mut usize, shape: &[usize]) -> Result<ArrayD<f64>> {
    let n: usize = shape.iter().product();
    let need = n * 4;
    if *offset + need > payload.len() {
        return Err(Error::Format(format!(
            "payload truncated: need {} bytes at offset {}, have {}",
            need,
            offset,
            payload.len()
        )));
    }
    let mut vals = Vec::with_capacity(n);
    for i in 0..n {
        let s = *offset + i * 4;
        let v = f32::from_le_bytes(payload[s..s + 4].try_into().unwrap());
        vals.push(v as f64);
    }
    *offset += need;
    ArrayD::from_shape_vec(IxDyn(shape), vals)
        .map_err(|e| Error::Format(format!("bad tensor shape {shape:?}: {e}")))
}
