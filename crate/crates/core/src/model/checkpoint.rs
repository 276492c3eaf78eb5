//! Binary checkpoint: magic, a length-prefixed JSON header, then every tensor
//! as little-endian f64 in [`ModelParameters::tensors`] order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{ModelParameters, ParamMeta};
use super::{ModelConfig, ModelError};
use crate::smiles::Vocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"RSPCKPT\n";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    meta: ParamMeta,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

const DTYPE: &str = "f64-le";

fn payload(params: &ModelParameters) -> Vec<u8> {
    params
        .tensors()
        .iter()
        .flat_map(|(_, _, data)| data.iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

pub fn save_checkpoint(params: &ModelParameters, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let body = payload(params);
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        meta: params.meta.clone(),
        tensors: params
            .tensors()
            .into_iter()
            .map(|(name, shape, _)| TensorEntry {
                name,
                dtype: DTYPE.to_owned(),
                shape,
            })
            .collect(),
        payload_sha256: hex::encode(Sha256::digest(&body)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&body)?;
    out.flush()?;
    Ok(())
}

/// Load a checkpoint. When `vocab` is given its hash must match the one
/// recorded at training time (an empty recorded hash matches anything).
pub fn load_checkpoint(path: impl AsRef<Path>, vocab: Option<&Vocabulary>) -> Result<ModelParameters, ModelError> {
    let bytes = fs::read(path)?;
    let corrupt = |msg: &str| ModelError::CorruptCheckpoint(msg.to_owned());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body_start]).map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let body = &bytes[body_start..];
    if hex::encode(Sha256::digest(body)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    if let Some(v) = vocab {
        let given = v.hash();
        if !header.meta.vocab_hash.is_empty() && header.meta.vocab_hash != given {
            return Err(ModelError::VocabMismatch {
                checkpoint: header.meta.vocab_hash,
                given,
            });
        }
    }
    header.config.validate()?;

    let mut params = ModelParameters::init(&header.config, 0);
    params.meta = header.meta;
    let layout: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
    if layout.len() != header.tensors.len()
        || layout
            .iter()
            .zip(&header.tensors)
            .any(|((n, s), e)| *n != e.name || *s != e.shape || e.dtype != DTYPE)
    {
        return Err(corrupt("tensor layout does not match config"));
    }
    let expected: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if body.len() != expected * 8 {
        return Err(corrupt("payload size does not match tensor layout"));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in params.tensors_mut() {
        for (dst, src) in t.iter_mut().zip(&mut values) {
            *dst = src;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelParameters {
        let mut cfg = ModelConfig::toy(12);
        cfg.layers_enc = 1;
        cfg.layers_dec = 1;
        cfg.d_model = 8;
        cfg.attn_heads = 2;
        cfg.d_ff = 16;
        cfg.medusa_heads = 2;
        cfg.medusa_hidden = 4;
        let mut p = ModelParameters::init(&cfg, 3);
        p.meta.training_step = 17;
        p
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = tiny();
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path, None).unwrap(), p);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&tiny(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(ModelError::CorruptCheckpoint(_))));
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(ModelError::CorruptCheckpoint(_))));
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(ModelError::CorruptCheckpoint(_))));
    }

    #[test]
    fn vocab_hash_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let trained_on = Vocabulary::build(["CCO"]).unwrap();
        let mut p = tiny();
        p.meta.vocab_hash = trained_on.hash();
        save_checkpoint(&p, &path).unwrap();
        assert!(load_checkpoint(&path, Some(&trained_on)).is_ok());
        let other = Vocabulary::build(["CCN"]).unwrap();
        assert!(matches!(
            load_checkpoint(&path, Some(&other)),
            Err(ModelError::VocabMismatch { .. })
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&tiny(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let needle = b"\"version\":1";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        // Same header length, so only the version differs.
        bytes[at + needle.len() - 1] = b'9';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path, None),
            Err(ModelError::CheckpointVersion { found: 9, .. })
        ));
    }
}
