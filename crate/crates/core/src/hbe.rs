//! HBE1 embedding files: precomputed text embeddings with binary moderation labels.
//!
//! Layout (little-endian, no padding):
//!
//! ```text
//! "HBE1"            4 bytes magic
//! d                 u32   embedding dimension
//! N                 u64   record count
//! N × record        [f32 × d] embedding, then u8 label (0 = free, 1 = hate)
//! trailer           16 bytes: first half of SHA-256 over every preceding byte
//! ```

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HBE1";
pub const HEADER_LEN: usize = 16;
pub const TRAILER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Free,
    Hate,
}

impl Label {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Label::Free),
            1 => Some(Label::Hate),
            _ => None,
        }
    }

    pub fn as_byte(self) -> u8 {
        match self {
            Label::Free => 0,
            Label::Hate => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Post {
    pub embedding: Vec<f32>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub posts: Vec<Post>,
}

fn checksum(payload: &[u8]) -> [u8; TRAILER_LEN] {
    let digest = Sha256::digest(payload);
    let mut out = [0u8; TRAILER_LEN];
    out.copy_from_slice(&digest[..TRAILER_LEN]);
    out
}

/// Serializes posts into HBE1 bytes. Every embedding must have length `dim`.
pub fn encode(dim: usize, posts: &[Post]) -> Result<Vec<u8>> {
    let dim32 = u32::try_from(dim).map_err(|_| Error::Input("dimension exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + posts.len() * (4 * dim + 1) + TRAILER_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&dim32.to_le_bytes());
    buf.extend_from_slice(&(posts.len() as u64).to_le_bytes());
    for (i, post) in posts.iter().enumerate() {
        if post.embedding.len() != dim {
            return Err(Error::Input(format!(
                "post {i} has {} entries, expected {dim}",
                post.embedding.len()
            )));
        }
        for x in &post.embedding {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.push(post.label.as_byte());
    }
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum);
    Ok(buf)
}

pub fn write<W: Write>(mut out: W, dim: usize, posts: &[Post]) -> Result<()> {
    out.write_all(&encode(dim, posts)?)?;
    Ok(())
}

pub fn write_path(path: impl AsRef<Path>, dim: usize, posts: &[Post]) -> Result<()> {
    std::fs::write(path, encode(dim, posts)?)?;
    Ok(())
}

/// Parses and integrity-checks HBE1 bytes.
pub fn decode(bytes: &[u8]) -> Result<EmbeddingFile> {
    let fmt = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fmt(0, "missing HBE1 magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len(), "truncated header"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let record_len = 4 * dim + 1;
    let expected = (count as u128) * record_len as u128 + (HEADER_LEN + TRAILER_LEN) as u128;
    if (bytes.len() as u128) < expected {
        let complete = (bytes.len().saturating_sub(HEADER_LEN)) / record_len;
        let offset = HEADER_LEN + complete * record_len;
        return Err(fmt(offset, &format!("truncated: expected {expected} bytes, found {}", bytes.len())));
    }
    if bytes.len() as u128 > expected {
        return Err(fmt(expected as usize, "trailing bytes after checksum"));
    }
    let payload_end = bytes.len() - TRAILER_LEN;
    let mut posts = Vec::with_capacity(count as usize);
    let mut offset = HEADER_LEN;
    for i in 0..count as usize {
        let rec = &bytes[offset..offset + record_len];
        let embedding: Vec<f32> = rec[..4 * dim]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let label_byte = rec[4 * dim];
        let label = Label::from_byte(label_byte).ok_or_else(|| {
            Error::Data(format!(
                "record {i} at byte {} has label {label_byte}, expected 0 or 1",
                offset + 4 * dim
            ))
        })?;
        posts.push(Post { embedding, label });
        offset += record_len;
    }
    if checksum(&bytes[..payload_end]) != bytes[payload_end..] {
        return Err(fmt(payload_end, "checksum mismatch"));
    }
    Ok(EmbeddingFile { dim, posts })
}

pub fn read_path(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn posts() -> Vec<Post> {
        vec![
            Post { embedding: vec![1.0, -2.0, 0.5], label: Label::Free },
            Post { embedding: vec![0.0, 0.25, 3.0], label: Label::Hate },
        ]
    }

    #[test]
    fn layout_is_exact() {
        let bytes = encode(3, &posts()).unwrap();
        assert_eq!(bytes.len(), 16 + 2 * 13 + 16);
        assert_eq!(&bytes[..4], b"HBE1");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes[28], 0);
        assert_eq!(bytes[41], 1);
        let digest = Sha256::digest(&bytes[..42]);
        assert_eq!(&bytes[42..], &digest[..16]);
        assert_eq!(decode(&bytes).unwrap(), EmbeddingFile { dim: 3, posts: posts() });
    }

    #[test]
    fn empty_file_is_valid() {
        let bytes = encode(7, &[]).unwrap();
        let f = decode(&bytes).unwrap();
        assert_eq!(f.dim, 7);
        assert!(f.posts.is_empty());
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode(3, &posts()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));

        assert!(matches!(decode(&bytes[..20]), Err(Error::Format { offset: 16, .. })));
        assert!(matches!(decode(&bytes[..35]), Err(Error::Format { offset: 29, .. })));

        let mut bad = bytes.clone();
        bad[17] ^= 0xff;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 42, .. })));

        let mut bad = bytes.clone();
        bad[28] = 2;
        assert!(matches!(decode(&bad), Err(Error::Data(_))));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Format { .. })));

        assert!(encode(2, &posts()).is_err());
    }
}
