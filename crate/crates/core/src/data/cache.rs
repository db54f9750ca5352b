//! Token cache file.
//!
//! Little-endian layout, 64-byte header then one record per image:
//!
//! ```text
//! 0   8  magic  "RTOKCACH"
//! 8   4  version (u32)
//! 12  4  codebook size K (u32)
//! 16  4  grid height h (u32)
//! 20  4  grid width w (u32)
//! 24  4  number of classes (u32)
//! 28  4  record count (u32)
//! 32 32  SHA-256 checksum of the producing tokenizer
//! 64  .. records: label (u16), then h*w indices (u16)
//! ```

use std::path::Path;

use crate::error::{input_err, Error, Result};
use crate::vq::{TokenSequence, Tokenizer};

use super::Dataset;

pub const CACHE_MAGIC: &[u8; 8] = b"RTOKCACH";
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_HEADER_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenCache {
    pub vocab_size: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub tokenizer_checksum: [u8; 32],
    pub sequences: Vec<TokenSequence>,
}

impl TokenCache {
    pub fn byte_len(&self) -> usize {
        CACHE_HEADER_LEN + self.sequences.len() * (2 + 2 * self.height * self.width)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.vocab_size > 65536 || self.num_classes >= 65536 {
            return Err(input_err!("token cache stores u16 indices and labels"));
        }
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(CACHE_MAGIC);
        for v in [CACHE_VERSION, self.vocab_size as u32, self.height as u32, self.width as u32, self.num_classes as u32, self.sequences.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.tokenizer_checksum);
        let n = self.height * self.width;
        for s in &self.sequences {
            if s.tokens.len() != n {
                return Err(input_err!("sequence of length {} in a cache of {n}-token grids", s.tokens.len()));
            }
            out.extend_from_slice(&(s.label as u16).to_le_bytes());
            for &t in &s.tokens {
                if t as usize >= self.vocab_size {
                    return Err(input_err!("token {t} out of range for K={}", self.vocab_size));
                }
                out.extend_from_slice(&(t as u16).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CACHE_HEADER_LEN || &bytes[..8] != CACHE_MAGIC {
            return Err(Error::Integrity("not a token cache (bad magic)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let version = u32_at(8) as u32;
        if version != CACHE_VERSION {
            return Err(Error::Integrity(format!("unsupported token cache version {version}")));
        }
        let (k, h, w, classes, count) = (u32_at(12), u32_at(16), u32_at(20), u32_at(24), u32_at(28));
        let checksum: [u8; 32] = bytes[32..64].try_into().unwrap();
        let rec = 2 + 2 * h * w;
        if bytes.len() != CACHE_HEADER_LEN + count * rec {
            return Err(Error::Integrity(format!(
                "token cache length {} does not match header ({count} records of {rec} bytes)",
                bytes.len()
            )));
        }
        let mut sequences = Vec::with_capacity(count);
        for chunk in bytes[CACHE_HEADER_LEN..].chunks_exact(rec) {
            let vals: Vec<u32> = chunk.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect();
            if vals[1..].iter().any(|&t| t as usize >= k) {
                return Err(Error::Integrity("token cache holds an index outside the codebook".into()));
            }
            sequences.push(TokenSequence { label: vals[0], tokens: vals[1..].to_vec() });
        }
        Ok(Self { vocab_size: k, height: h, width: w, num_classes: classes, tokenizer_checksum: checksum, sequences })
    }
}

/// Tokenize every image of `dataset` once.
pub fn build_token_cache(dataset: &Dataset, tokenizer: &Tokenizer) -> Result<TokenCache> {
    let g = tokenizer.config.grid_size();
    Ok(TokenCache {
        vocab_size: tokenizer.codebook.size(),
        height: g,
        width: g,
        num_classes: dataset.num_classes,
        tokenizer_checksum: tokenizer.checksum()?,
        sequences: tokenizer.tokenize_sequences(&dataset.images, &dataset.labels)?,
    })
}

pub fn save_token_cache(cache: &TokenCache, path: &Path) -> Result<()> {
    std::fs::write(path, cache.to_bytes()?)?;
    Ok(())
}

/// Load a cache; when `expected_checksum` is given the cache must have been
/// produced by that tokenizer.
pub fn load_token_cache(path: &Path, expected_checksum: Option<&[u8; 32]>) -> Result<TokenCache> {
    let cache = TokenCache::from_bytes(&std::fs::read(path)?)?;
    if let Some(expected) = expected_checksum {
        if &cache.tokenizer_checksum != expected {
            return Err(Error::Integrity(format!(
                "token cache {} was built by a different tokenizer (checksum {} vs expected {}); rebuild it with `rear tokenize`",
                path.display(),
                hex(&cache.tokenizer_checksum),
                hex(expected)
            )));
        }
    }
    Ok(cache)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TokenCache {
        TokenCache {
            vocab_size: 256,
            height: 2,
            width: 3,
            num_classes: 10,
            tokenizer_checksum: [7; 32],
            sequences: vec![
                TokenSequence { tokens: vec![0, 1, 2, 3, 4, 255], label: 3 },
                TokenSequence { tokens: vec![9, 9, 9, 9, 9, 9], label: 10 },
            ],
        }
    }

    #[test]
    fn size_and_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(bytes.len(), 64 + 2 * (2 + 2 * 6));
        assert_eq!(bytes.len(), c.byte_len());
        assert_eq!(TokenCache::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn checksum_binding() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tok");
        save_token_cache(&sample(), &p).unwrap();
        assert!(load_token_cache(&p, Some(&[7; 32])).is_ok());
        assert!(matches!(load_token_cache(&p, Some(&[8; 32])), Err(Error::Integrity(_))));
    }

    #[test]
    fn rejects_bad_files() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(TokenCache::from_bytes(&bytes[..70]).is_err());
        bytes[0] = b'X';
        assert!(TokenCache::from_bytes(&bytes).is_err());
    }
}
