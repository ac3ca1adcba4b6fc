use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{FeatureSeq, TokenSeq};

const MAGIC: &[u8; 4] = b"EATF";
const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

/// Serialises features as binary32, row-major, after a 16-byte header.
pub fn encode_features(x: &FeatureSeq) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * x.data().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(x.n_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(x.dim() as u32).to_le_bytes());
    for &v in x.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureSeq> {
    let bad = |offset: usize, reason: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(0, "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(4, &format!("unsupported version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (n, dim) = (u32_at(8), u32_at(12));
    if n == 0 || dim == 0 {
        return Err(bad(8, "zero extent"));
    }
    let want = n
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| bad(8, "extent overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < want {
        return Err(bad(bytes.len(), "truncated payload"));
    }
    if payload.len() > want {
        return Err(bad(HEADER_LEN + want, "trailing bytes"));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(bad(HEADER_LEN + 4 * i, "non-finite value"));
    }
    FeatureSeq::new(n, dim, data)
}

pub fn write_features(path: &Path, x: &FeatureSeq) -> Result<()> {
    fs::write(path, encode_features(x)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSeq> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// One utterance per line, ids separated by single spaces.
pub fn write_token_file(path: &Path, seqs: &[&TokenSeq]) -> Result<()> {
    let mut out = String::new();
    for s in seqs {
        let line: Vec<String> = s.tokens().iter().map(usize::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_token_file(path: &Path, vocab: usize) -> Result<Vec<TokenSeq>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut out = Vec::new();
    for line in text.lines() {
        let ids = line
            .split_whitespace()
            .map(|w| w.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset,
                reason: e.to_string(),
            })?;
        out.push(TokenSeq::new(ids, vocab)?);
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}
