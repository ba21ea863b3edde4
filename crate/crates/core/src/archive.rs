//! Checksummed container shared by checkpoints and dataset caches.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON
//! value_count  u64
//! values       value_count x f64
//! crc32        u32 over every preceding byte
//! ```

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("not a {expected} file (bad magic)")]
    BadMagic { expected: &'static str },
    #[error("file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("header is not valid UTF-8 JSON: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const PREFIX: usize = 8 + 4;

pub fn encode(magic: &[u8; 8], header: &str, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX + header.len() + 8 + values.len() * 8 + 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Declared total size, if the fixed-size fields are present.
fn declared_len(bytes: &[u8]) -> Option<usize> {
    let header_len = u32::from_le_bytes(bytes.get(8..12)?.try_into().ok()?) as usize;
    let count_at = PREFIX + header_len;
    let count = u64::from_le_bytes(bytes.get(count_at..count_at + 8)?.try_into().ok()?) as usize;
    Some(count_at + 8 + count.checked_mul(8)? + 4)
}

/// Verifies and splits an encoded container into its header and values.
pub fn decode(
    magic: &[u8; 8],
    kind: &'static str,
    bytes: &[u8],
) -> Result<(String, Vec<f64>), ArchiveError> {
    if bytes.len() < PREFIX + 8 + 4 {
        return Err(ArchiveError::Truncated {
            expected: PREFIX + 8 + 4,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != magic {
        return Err(ArchiveError::BadMagic { expected: kind });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(match declared_len(bytes) {
            Some(expected) if expected > bytes.len() => ArchiveError::Truncated {
                expected,
                found: bytes.len(),
            },
            _ => ArchiveError::Checksum { stored, computed },
        });
    }
    match declared_len(bytes) {
        Some(expected) if expected == bytes.len() => {}
        Some(expected) => {
            return Err(ArchiveError::Truncated {
                expected,
                found: bytes.len(),
            })
        }
        None => {
            return Err(ArchiveError::Truncated {
                expected: PREFIX + 8 + 4,
                found: bytes.len(),
            })
        }
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[PREFIX..PREFIX + header_len])
        .map_err(|e| ArchiveError::Header(e.to_string()))?
        .to_string();
    let values = bytes[PREFIX + header_len + 8..bytes.len() - 4]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub fn write_file(path: &Path, magic: &[u8; 8], header: &str, values: &[f64]) -> std::io::Result<()> {
    std::fs::write(path, encode(magic, header, values))
}

pub fn read_file(
    path: &Path,
    magic: &[u8; 8],
    kind: &'static str,
) -> Result<(String, Vec<f64>), ArchiveError> {
    decode(magic, kind, &std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTARCH";

    #[test]
    fn round_trip() {
        let values = vec![1.5, -0.0, f64::MAX, 1e-300];
        let bytes = encode(MAGIC, "{\"a\":1}", &values);
        let (h, v) = decode(MAGIC, "test", &bytes).unwrap();
        assert_eq!(h, "{\"a\":1}");
        assert_eq!(
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn flipped_byte_is_checksum_error() {
        let mut bytes = encode(MAGIC, "{}", &[1.0, 2.0, 3.0]);
        let mid = bytes.len() - 10;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(MAGIC, "test", &bytes), Err(ArchiveError::Checksum { .. })));
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode(MAGIC, "{}", &[1.0, 2.0, 3.0]);
        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(decode(MAGIC, "test", cut), Err(ArchiveError::Truncated { .. })));
        assert!(matches!(decode(MAGIC, "test", &bytes[..5]), Err(ArchiveError::Truncated { .. })));
    }

    #[test]
    fn wrong_magic() {
        let bytes = encode(b"OTHERMAG", "{}", &[]);
        assert!(matches!(decode(MAGIC, "test", &bytes), Err(ArchiveError::BadMagic { .. })));
    }
}
