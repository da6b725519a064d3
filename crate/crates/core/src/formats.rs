//! Self-describing binary containers for datasets and checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian `u32` header length, the JSON
//! header, the concatenated little-endian `f64` blobs, then a CRC32 of
//! everything after the magic.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"OBSFLOW1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OBSPARM1";

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, blobs: &[&[f64]]) -> Result<Vec<u8>> {
    let head = serde_json::to_vec(header)?;
    let head_len = u32::try_from(head.len()).map_err(|_| Error::Format("header too large".into()))?;
    let total: usize = blobs.iter().map(|b| b.len()).sum();
    let mut buf = Vec::with_capacity(8 + 4 + head.len() + 8 * total + 4);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&head_len.to_le_bytes());
    buf.extend_from_slice(&head);
    for blob in blobs {
        for v in blob.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[8..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

/// Parses a container and returns the header and all `f64` values.
pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    ensure!(bytes.len() >= 16, Format, "file too short ({} bytes)", bytes.len());
    ensure!(
        &bytes[..8] == magic,
        Format,
        "bad magic {:?}, expected {:?}",
        String::from_utf8_lossy(&bytes[..8]),
        String::from_utf8_lossy(magic)
    );
    let body = &bytes[8..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    ensure!(crc32fast::hash(body) == stored, Format, "checksum mismatch: file is corrupted or truncated");
    let head_len = u32::from_le_bytes(body[..4].try_into().unwrap()) as usize;
    ensure!(4 + head_len <= body.len(), Format, "header length {head_len} exceeds file size");
    let header: H = serde_json::from_slice(&body[4..4 + head_len])
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    let data = &body[4 + head_len..];
    ensure!(data.len().is_multiple_of(8), Format, "payload is not a whole number of f64 values");
    let values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, values))
}

pub fn write_file<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, blobs: &[&[f64]]) -> Result<()> {
    let bytes = encode(magic, header, blobs)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path)?;
    decode(magic, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, serde::Deserialize, PartialEq, Debug)]
    struct H {
        n: usize,
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = [1.0, -0.0, f64::MIN_POSITIVE, 1e300];
        let b = [std::f64::consts::PI];
        let bytes = encode(DATASET_MAGIC, &H { n: 5 }, &[&a, &b]).unwrap();
        let (h, vals): (H, _) = decode(DATASET_MAGIC, &bytes).unwrap();
        assert_eq!(h, H { n: 5 });
        let bits: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = a.iter().chain(&b).map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = encode(DATASET_MAGIC, &H { n: 1 }, &[&[1.0, 2.0]]).unwrap();
        let k = bytes.len() - 10;
        bytes[k] ^= 0x10;
        assert!(matches!(decode::<H>(DATASET_MAGIC, &bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_rejected() {
        let bytes = encode(CHECKPOINT_MAGIC, &H { n: 1 }, &[]).unwrap();
        assert!(decode::<H>(DATASET_MAGIC, &bytes).is_err());
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode(DATASET_MAGIC, &H { n: 1 }, &[&[1.0, 2.0]]).unwrap();
        assert!(decode::<H>(DATASET_MAGIC, &bytes[..bytes.len() - 3]).is_err());
        assert!(decode::<H>(DATASET_MAGIC, &bytes[..5]).is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(content_hash(&H { n: 3 }).unwrap(), content_hash(&H { n: 3 }).unwrap());
        assert_ne!(content_hash(&H { n: 3 }).unwrap(), content_hash(&H { n: 4 }).unwrap());
    }
}
