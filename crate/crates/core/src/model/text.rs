//! Deterministic stand-in for a frozen text encoder.
//!
//! `ToyPrototype` looks class ids up in the synthetic prototype table and
//! embeds anything else as the normalised mean of per-token vectors: a token
//! naming a known class contributes that class prototype, any other token a
//! seeded pseudo-random unit vector derived from its hash.
//! `ExternalEmbedding` passes through vectors supplied with the definition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Prototypes;
use crate::error::{Error, Result};
use crate::tensor::{l2_normalize, Mat};
use crate::types::{AnomalyDefinition, ClassEntry, NORMAL_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderMode {
    ToyPrototype,
    ExternalEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub mode: TextEncoderMode,
    pub dim: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototypes: Option<Prototypes>,
}

impl TextEncoder {
    pub fn toy(prototypes: Prototypes, seed: u64) -> Self {
        TextEncoder {
            mode: TextEncoderMode::ToyPrototype,
            dim: prototypes.dim,
            seed,
            prototypes: Some(prototypes),
        }
    }

    pub fn external(dim: usize) -> Self {
        TextEncoder {
            mode: TextEncoderMode::ExternalEmbedding,
            dim,
            seed: 0,
            prototypes: None,
        }
    }

    /// Raw `C×E` class embeddings, one row per definition entry.
    pub fn embed(&self, definition: &AnomalyDefinition) -> Result<Mat> {
        let rows = definition
            .classes()
            .iter()
            .map(|c| self.embed_entry(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mat::from_rows(&rows))
    }

    pub fn embed_entry(&self, entry: &ClassEntry) -> Result<Vec<f64>> {
        if let Some(e) = &entry.embedding {
            if e.len() != self.dim {
                return Err(Error::invalid(format!(
                    "class `{}` embedding has width {}, expected {}",
                    entry.class_id,
                    e.len(),
                    self.dim
                )));
            }
            return Ok(e.clone());
        }
        match self.mode {
            TextEncoderMode::ExternalEmbedding => Err(Error::invalid(format!(
                "class `{}` has no embedding (external embedding mode)",
                entry.class_id
            ))),
            TextEncoderMode::ToyPrototype => {
                let protos = self
                    .prototypes
                    .as_ref()
                    .ok_or_else(|| Error::invalid("toy text encoder needs a prototype table"))?;
                if entry.class_id == NORMAL_LABEL {
                    return Ok(protos.background.clone());
                }
                if let Some(p) = protos.class(&entry.class_id) {
                    return Ok(p.vector.clone());
                }
                Ok(self.embed_prompt(&entry.prompt_text))
            }
        }
    }

    /// Token-averaged embedding of free text.
    pub fn embed_prompt(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        let mut acc = vec![0.0; self.dim];
        for tok in &tokens {
            let v = self.token_vector(tok);
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
        if !tokens.is_empty() {
            acc.iter_mut().for_each(|a| *a /= tokens.len() as f64);
        }
        l2_normalize(&mut acc);
        acc
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        if let Some(protos) = &self.prototypes {
            if let Some(p) = protos
                .classes
                .iter()
                .find(|c| c.name == token || c.class_id == token)
            {
                return p.vector.clone();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(token.as_bytes()));
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        l2_normalize(&mut v);
        v
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
