//! Binary checkpoint container.
//!
//! ```text
//! magic    b"STAGEVLM"
//! version  u32
//! header   u32 length + JSON {"config": VLMConfig, "vocab": [..]}
//! count    u32
//! params   per parameter: u32 name length, name, u8 component tag,
//!          u32 ndim, ndim × u64 dims, numel × f64
//! digest   SHA-256 of every preceding byte
//! ```
//!
//! Integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::vocab::Vocab;
use crate::error::{Error, Result};
use crate::model::config::VLMConfig;
use crate::model::params::{Component, Param, VLMParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STAGEVLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: VLMConfig,
    vocab: Vocab,
}

pub fn encode(params: &VLMParams, vocab: &Vocab) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        config: params.config.clone(),
        vocab: vocab.clone(),
    })
    .expect("header serializes");
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.component.tag());
        out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in p.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(VLMParams, Vocab)> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (truncated or corrupted file)".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.config.validate()?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 parameter name".into()))?;
        let tag = r.take(1)?[0];
        let component = Component::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown component tag {tag}")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        named.push(Param { name, component, tensor });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let params = VLMParams::from_named(&header.config, named)?;
    if header.vocab.len() > header.config.decoder.vocab {
        return Err(Error::Checkpoint("vocabulary larger than the model's".into()));
    }
    Ok((params, header.vocab))
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, params: &VLMParams, vocab: &Vocab) -> Result<()> {
    write_atomic(path, &encode(params, vocab))
}

pub fn load(path: &Path) -> Result<(VLMParams, Vocab)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (VLMParams, Vocab) {
        let params = VLMParams::init(&VLMConfig::desk(), 11).unwrap();
        let vocab = Vocab::build(["a small red circle"], 512).unwrap();
        (params, vocab)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (params, vocab) = fixture();
        let bytes = encode(&params, &vocab);
        let (p2, v2) = decode(&bytes).unwrap();
        assert_eq!(v2, vocab);
        for (a, b) in params.params().iter().zip(p2.params()) {
            assert_eq!(a.name, b.name);
            assert!(a.tensor.bitwise_eq(&b.tensor));
        }
        assert_eq!(encode(&p2, &v2), bytes);
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let (params, vocab) = fixture();
        let bytes = encode(&params, &vocab);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Checkpoint(_))));
        assert!(decode(b"hello").is_err());
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let (params, vocab) = fixture();
        save(&path, &params, &vocab).unwrap();
        assert!(!dir.path().join("m.ckpt.tmp").exists());
        let (p2, _) = load(&path).unwrap();
        assert_eq!(p2, params);
    }
}
