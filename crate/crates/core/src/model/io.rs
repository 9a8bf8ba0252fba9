//! Binary weight container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic        8 bytes   "CCMPWT01"
//! header       7 x u32   n_layers n_heads d_model d_head vocab_size max_train_positions ff_mult
//! matrices     f64...    token_embedding, per layer [w_q w_k w_v w_o ff_up ff_down], lm_head
//! ```
//!
//! Matrices are row-major with shapes implied by the header.

use std::fs;
use std::path::Path;

use super::weights::{ModelConfig, ModelWeights};
use crate::error::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 8] = b"CCMPWT01";

pub fn encode_weights(w: &ModelWeights) -> Vec<u8> {
    let c = &w.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    for v in [
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.d_head,
        c.vocab_size,
        c.max_train_positions,
        c.ff_mult,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for m in w.matrices() {
        for x in m.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<ModelWeights> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 8 + 7 * 4 || &bytes[..8] != WEIGHT_MAGIC {
        return Err(bad("not a weight file (bad magic)".into()));
    }
    let mut header = [0usize; 7];
    for (i, h) in header.iter_mut().enumerate() {
        let o = 8 + 4 * i;
        *h = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    let cfg = ModelConfig {
        n_layers: header[0],
        n_heads: header[1],
        d_model: header[2],
        d_head: header[3],
        vocab_size: header[4],
        max_train_positions: header[5],
        ff_mult: header[6],
    };
    cfg.validate()?;
    let mut w = ModelWeights::zeros(cfg)?;
    let expected: usize = w.matrices().iter().map(|m| m.data().len()).sum();
    let body = &bytes[8 + 7 * 4..];
    if body.len() != expected * 8 {
        return Err(bad(format!(
            "expected {} bytes of matrix data, found {}",
            expected * 8,
            body.len()
        )));
    }
    let mut vals = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for m in w.matrices_mut() {
        for x in m.data_mut() {
            *x = vals.next().unwrap();
        }
    }
    w.validate()?;
    Ok(w)
}

pub fn write_weights(w: &ModelWeights, path: &Path) -> Result<()> {
    fs::write(path, encode_weights(w)).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<ModelWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path)
}
