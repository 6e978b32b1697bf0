//! Checkpoint file: `"VADCKPT1"`, `u32` header length, JSON header, then the
//! little-endian `f32` payload. The header carries the architecture hash,
//! the full config, the text encoder and a name/shape/offset manifest.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::network::Model;
use crate::model::params::ParamStore;
use crate::model::text::TextEncoder;
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"VADCKPT1";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    embed_dim: usize,
    config: Config,
    text_encoder: TextEncoder,
    params: Vec<ParamEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub model: Model,
    pub text: TextEncoder,
    /// Free-form training metadata (epoch, selection metric, ...).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.architecture_hash(self.model.arch.embed_dim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.model.params.len());
        let mut offset = 0;
        for (name, m) in self.model.params.iter() {
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: [m.rows(), m.cols()],
                offset,
            });
            offset += m.len();
        }
        let header = Header {
            config_hash: self.config_hash(),
            embed_dim: self.model.arch.embed_dim,
            config: self.config.clone(),
            text_encoder: self.text.clone(),
            params: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for m in self.model.params.values() {
            for &v in m.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Load `path`. With `expected`, the architecture hash must match unless
    /// `force` is set.
    pub fn load(path: &Path, expected: Option<&Config>, force: bool) -> Result<Checkpoint> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint".into()));
        }
        let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(corrupt("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(e.to_string()))?;
        let payload = &body[hlen..];
        let config = header.config.clone().validate()?;
        let own_hash = config.architecture_hash(header.embed_dim);
        if own_hash != header.config_hash {
            return Err(corrupt("header hash does not match its own config".into()));
        }
        if let Some(exp) = expected {
            let want = exp.architecture_hash(header.embed_dim);
            if want != header.config_hash && !force {
                return Err(Error::HashMismatch {
                    expected: want,
                    found: header.config_hash,
                });
            }
        }
        let mut store = ParamStore::new();
        for e in &header.params {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset * 4;
            let end = start + n * 4;
            if end > payload.len() {
                return Err(corrupt(format!("payload too short for {}", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], data));
        }
        let model = Model::from_params(&config, header.embed_dim, store)?;
        Ok(Checkpoint {
            config,
            model,
            text: header.text_encoder,
            meta: header.meta,
        })
    }
}

/// Round every parameter to `f32`, as a save/load cycle would.
pub fn round_to_f32(params: &mut ParamStore) {
    for m in params.values_mut() {
        m.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
