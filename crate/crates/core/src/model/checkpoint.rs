//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `GCNLM001`, a little-endian `u64` header length,
//! a JSON header (config, vocabulary hash, parameter names and shapes), then
//! every parameter value as a little-endian `f64` in header order.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::Mat;
use super::{emittable_mask, ConditionalLM, LMConfig};
use crate::corpus::Vocabulary;
use crate::error::{GcnError, Result};

const MAGIC: &[u8; 8] = b"GCNLM001";

#[derive(Serialize, Deserialize)]
struct Header {
    config: LMConfig,
    vocab_hash: String,
    params: Vec<(String, usize, usize)>,
}

impl ConditionalLM {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            vocab_hash: self.vocab.hash(),
            params: self.config.param_shapes(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], vocab: Arc<Vocabulary>) -> Result<Self> {
        let bad = |m: &str| GcnError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.vocab_hash != vocab.hash() {
            return Err(bad("vocabulary does not match the checkpoint"));
        }
        header.config.validate()?;
        if header.params != header.config.param_shapes() {
            return Err(bad("parameter layout does not match the config"));
        }
        let mut data = bytes[16 + hlen..].chunks_exact(8);
        let mut params = Vec::with_capacity(header.params.len());
        for (_, r, c) in &header.params {
            let values: Vec<f64> = data
                .by_ref()
                .take(r * c)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            if values.len() != r * c {
                return Err(bad("truncated parameter data"));
            }
            params.push(Mat::from_vec(*r, *c, values));
        }
        if data.next().is_some() || !data.remainder().is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        Ok(ConditionalLM {
            emittable: emittable_mask(header.config.vocab_size),
            config: header.config,
            params,
            vocab,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| GcnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, vocab: Arc<Vocabulary>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| GcnError::io(path, e))?;
        Self::from_bytes(&bytes, vocab)
    }
}
