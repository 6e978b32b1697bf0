//! Run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub hidden_size: usize,
    pub encoder_layers: usize,
    pub fusion_layers: usize,
    pub conv_kernel: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Foreground/background aggregation temperature.
    pub eta: f64,
    /// Synthesis probability.
    pub theta: f64,
    /// Normal-anchor probability.
    pub alpha: f64,
    /// Maximum number of synthesized segments.
    pub delta_m: usize,
    /// Nearest neighbours kept per video.
    pub knn_n: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Top-k size is `len / topk_divisor + 1`.
    pub topk_divisor: usize,
    pub mil_align_temperature: f64,
    pub seed: u64,
    pub use_dvs: bool,
    pub use_neg: bool,
    pub language_guided: bool,
    /// Apply the pseudo-label term of the synthesis loss only to samples with
    /// more than one segment.
    pub restrict_dvs_third_term_to_m_gt_1: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Multiplier applied to the learning rate per epoch; 1 keeps it constant.
    pub lr_decay: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            hidden_size: 512,
            encoder_layers: 2,
            fusion_layers: 2,
            conv_kernel: 9,
            tau: 0.02,
            eta: 0.02,
            theta: 0.7,
            alpha: 0.5,
            delta_m: 5,
            knn_n: 200,
            batch_size: 64,
            learning_rate: 5e-5,
            epochs: 40,
            topk_divisor: 16,
            mil_align_temperature: 0.07,
            seed: 0,
            use_dvs: true,
            use_neg: true,
            language_guided: true,
            restrict_dvs_third_term_to_m_gt_1: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 0.0,
            lr_decay: 1.0,
        }
    }
}

fn bad(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Config {
        field,
        reason: reason.into(),
    }
}

impl Config {
    pub fn validate(self) -> Result<Config> {
        let c = &self;
        if c.hidden_size < 2 || !c.hidden_size.is_multiple_of(2) {
            return Err(bad("hidden_size", "must be an even number >= 2"));
        }
        if c.hidden_size >= 64 && !c.hidden_size.is_multiple_of(64) {
            return Err(bad("hidden_size", "must be a multiple of 64 when >= 64"));
        }
        if c.conv_kernel == 0 || c.conv_kernel.is_multiple_of(2) {
            return Err(bad("conv_kernel", "must be odd"));
        }
        if !(c.tau > 0.0 && c.tau.is_finite()) {
            return Err(bad("tau", "must be > 0"));
        }
        if !(c.eta > 0.0 && c.eta.is_finite()) {
            return Err(bad("eta", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&c.theta) {
            return Err(bad("theta", format!("{} not in [0, 1]", c.theta)));
        }
        if !(0.0..=1.0).contains(&c.alpha) {
            return Err(bad("alpha", format!("{} not in [0, 1]", c.alpha)));
        }
        if c.delta_m < 1 {
            return Err(bad("delta_m", "must be >= 1"));
        }
        if c.knn_n < 1 {
            return Err(bad("knn_n", "must be >= 1"));
        }
        if c.batch_size < 1 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if !(c.learning_rate >= 0.0 && c.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be >= 0"));
        }
        if c.topk_divisor < 1 {
            return Err(bad("topk_divisor", "must be >= 1"));
        }
        if !(c.mil_align_temperature > 0.0 && c.mil_align_temperature.is_finite()) {
            return Err(bad("mil_align_temperature", "must be > 0"));
        }
        if !(0.0..1.0).contains(&c.adam_beta1) {
            return Err(bad("adam_beta1", "must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&c.adam_beta2) {
            return Err(bad("adam_beta2", "must be in [0, 1)"));
        }
        if !(c.adam_eps > 0.0) {
            return Err(bad("adam_eps", "must be > 0"));
        }
        if !(c.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be >= 0"));
        }
        if !(c.grad_clip >= 0.0) {
            return Err(bad("grad_clip", "must be >= 0"));
        }
        if !(c.lr_decay > 0.0 && c.lr_decay <= 1.0) {
            return Err(bad("lr_decay", "must be in (0, 1]"));
        }
        Ok(self)
    }

    pub fn from_json(text: &str) -> Result<Config> {
        serde_json::from_str::<Config>(text)?.validate()
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Number of attention heads: one per 64 hidden units, at least one.
    pub fn attention_heads(&self) -> usize {
        (self.hidden_size / 64).max(1)
    }

    /// Top-k size for a sequence of `len` valid steps.
    pub fn topk(&self, len: usize) -> usize {
        topk_size(len, self.topk_divisor)
    }

    /// Hash of everything that determines parameter shapes.
    pub fn architecture_hash(&self, embed_dim: usize) -> String {
        let key = format!(
            "hidden={};enc={};fus={};kernel={};embed={}",
            self.hidden_size, self.encoder_layers, self.fusion_layers, self.conv_kernel, embed_dim
        );
        let digest = Sha256::digest(key.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// `⌊len / divisor⌋ + 1`, capped at `len`.
pub fn topk_size(len: usize, divisor: usize) -> usize {
    (len / divisor + 1).min(len.max(1))
}
