//! The detection network.
//!
//! ```text
//! features ─ input proj ─ temporal encoder (RoPE self-attention) ─ v_t ─┬─ conv_pre ─┐
//! prompts ── text enc ── input proj ─ z_t ─┐                           │            gate ─ y_bin
//!                                          └──── co-attention fusion ──┴ v_u ─ conv_post ┘
//!                                                                z_u ─┴─ cosine head ─ y_mul
//! ```
//!
//! Blocks are pre-norm with residuals around every sublayer. Attention uses
//! `hidden / 64` heads (at least one).

use std::rc::Rc;

use crate::autograd::{RopeTable, Tape, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::params::{BoundParams, Init, ParamStore};
use crate::model::text::TextEncoder;
use crate::rng::Rng;
use crate::tensor::{softmax, Mat};
use crate::types::{AnomalyDefinition, FeatureSequence, ScoreResult};

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
const ROPE_BASE: f64 = 10_000.0;
const FFN_MULT: usize = 4;

/// Shape-determining hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub embed_dim: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub fusion_layers: usize,
    pub conv_kernel: usize,
    pub heads: usize,
}

impl Architecture {
    pub fn new(cfg: &Config, embed_dim: usize) -> Self {
        Architecture {
            embed_dim,
            hidden: cfg.hidden_size,
            encoder_layers: cfg.encoder_layers,
            fusion_layers: cfg.fusion_layers,
            conv_kernel: cfg.conv_kernel,
            heads: cfg.attention_heads(),
        }
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn has_input_proj(&self) -> bool {
        self.embed_dim != self.hidden
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
}

/// Every intermediate the losses need, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub v_t: Var,
    pub v_u: Var,
    pub z_t: Var,
    pub z_u: Var,
    pub y_bin: Var,
    pub y_mul: Var,
}

impl Model {
    pub fn init(cfg: &Config, embed_dim: usize, rng: &mut Rng) -> Model {
        let arch = Architecture::new(cfg, embed_dim);
        let h = arch.hidden;
        let mut init = Init {
            rng,
            store: ParamStore::new(),
        };
        if arch.has_input_proj() {
            init.linear("in", embed_dim, h);
        }
        for i in 0..arch.encoder_layers {
            let p = format!("enc.{i}");
            init.layer_norm(&format!("{p}.ln1"), h);
            attention_params(&mut init, &format!("{p}.attn"), h);
            init.layer_norm(&format!("{p}.ln2"), h);
            ffn_params(&mut init, &format!("{p}.ffn"), h);
        }
        for i in 0..arch.fusion_layers {
            for branch in ["vid", "txt"] {
                let p = format!("fus.{i}.{branch}");
                init.layer_norm(&format!("{p}.lnq"), h);
                init.layer_norm(&format!("{p}.lnkv"), h);
                attention_params(&mut init, &format!("{p}.attn"), h);
                init.layer_norm(&format!("{p}.ln2"), h);
                ffn_params(&mut init, &format!("{p}.ffn"), h);
            }
        }
        let k = arch.conv_kernel;
        for path in ["pre", "post"] {
            init.normal(format!("det.{path}.w"), k, h, 1.0 / ((k * h) as f64).sqrt());
            init.constant(format!("det.{path}.b"), Mat::scalar(0.0));
        }
        init.constant("det.gate".into(), Mat::scalar(0.0));
        let std = 1.0 / (h as f64).sqrt();
        init.normal("cls.vid".into(), h, h, std);
        init.normal("cls.txt".into(), h, h, std);
        Model {
            arch,
            params: init.store,
        }
    }

    /// Wrap loaded parameters after checking names and shapes against a fresh
    /// initialisation of the same architecture.
    pub fn from_params(cfg: &Config, embed_dim: usize, params: ParamStore) -> Result<Model> {
        let reference = Model::init(cfg, embed_dim, &mut crate::rng::make_rng(0));
        if reference.params.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, m) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == m.shape() => {}
                Some(p) => {
                    return Err(Error::invalid(format!(
                        "parameter {name}: shape {:?}, expected {:?}",
                        p.shape(),
                        m.shape()
                    )))
                }
                None => return Err(Error::invalid(format!("missing parameter {name}"))),
            }
        }
        Ok(Model {
            arch: reference.arch,
            params,
        })
    }

    fn linear(&self, tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Var {
        let y = tape.matmul(x, p.get(&format!("{prefix}.w")));
        tape.add_row(y, p.get(&format!("{prefix}.b")))
    }

    fn ln(&self, tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Var {
        tape.layer_norm(x, p.get(&format!("{prefix}.g")), p.get(&format!("{prefix}.b")), LN_EPS)
    }

    fn ffn(&self, tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Var {
        let h = self.linear(tape, p, &format!("{prefix}.1"), x);
        let a = tape.gelu(h);
        self.linear(tape, p, &format!("{prefix}.2"), a)
    }

    /// Multi-head attention of `q_in` rows over `kv_in` rows.
    pub(crate) fn attention(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        mask: Option<&[bool]>,
        rope: Option<Rc<RopeTable>>,
    ) -> Var {
        let heads = self.arch.heads;
        let d = self.arch.head_dim();
        let mut q = self.linear(tape, p, &format!("{prefix}.q"), q_in);
        let mut k = self.linear(tape, p, &format!("{prefix}.k"), kv_in);
        let v = self.linear(tape, p, &format!("{prefix}.v"), kv_in);
        if let Some(table) = rope {
            q = tape.rope(q, heads, table.clone());
            k = tape.rope(k, heads, table);
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * d, d),
                    tape.slice_cols(k, h * d, d),
                    tape.slice_cols(v, h * d, d),
                )
            };
            let s = tape.matmul_nt(qh, kh);
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s, mask);
            outs.push(tape.matmul(a, vh));
        }
        let o = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        self.linear(tape, p, &format!("{prefix}.o"), o)
    }

    /// Project raw `rows×E` embeddings to the hidden width.
    pub fn project_input(&self, tape: &mut Tape, p: &BoundParams, raw: Var) -> Var {
        if self.arch.has_input_proj() {
            self.linear(tape, p, "in", raw)
        } else {
            raw
        }
    }

    /// Temporal encoder over the first `valid` rows of `x` (`L×E`). Padded
    /// rows neither attend nor are attended to.
    pub fn encode_video(&self, tape: &mut Tape, p: &BoundParams, x: Var, valid: usize) -> Var {
        let (l, _) = tape.shape(x);
        assert!(valid >= 1 && valid <= l, "valid length out of range");
        let mask = (valid < l).then(|| {
            let mut m = vec![false; l * l];
            for i in 0..valid {
                m[i * l..i * l + valid].iter_mut().for_each(|b| *b = true);
            }
            m
        });
        let table = Rc::new(RopeTable::new(l, self.arch.head_dim(), ROPE_BASE));
        let mut h = self.project_input(tape, p, x);
        for i in 0..self.arch.encoder_layers {
            let pre = format!("enc.{i}");
            let n = self.ln(tape, p, &format!("{pre}.ln1"), h);
            let a = self.attention(
                tape,
                p,
                &format!("{pre}.attn"),
                n,
                n,
                mask.as_deref(),
                Some(table.clone()),
            );
            h = tape.add(h, a);
            let n = self.ln(tape, p, &format!("{pre}.ln2"), h);
            let f = self.ffn(tape, p, &format!("{pre}.ffn"), n);
            h = tape.add(h, f);
        }
        h
    }

    /// Co-attention fusion. Each branch queries the other branch's layer input.
    pub fn fuse(&self, tape: &mut Tape, p: &BoundParams, v_t: Var, z_t: Var, valid: usize) -> (Var, Var) {
        let (l, _) = tape.shape(v_t);
        let (c, _) = tape.shape(z_t);
        let text_mask = (valid < l).then(|| {
            let mut m = vec![false; c * l];
            for i in 0..c {
                m[i * l..i * l + valid].iter_mut().for_each(|b| *b = true);
            }
            m
        });
        let (mut v, mut z) = (v_t, z_t);
        for i in 0..self.arch.fusion_layers {
            let pv = format!("fus.{i}.vid");
            let pz = format!("fus.{i}.txt");
            let qv = self.ln(tape, p, &format!("{pv}.lnq"), v);
            let kz = self.ln(tape, p, &format!("{pv}.lnkv"), z);
            let av = self.attention(tape, p, &format!("{pv}.attn"), qv, kz, None, None);
            let qz = self.ln(tape, p, &format!("{pz}.lnq"), z);
            let kv = self.ln(tape, p, &format!("{pz}.lnkv"), v);
            let az = self.attention(tape, p, &format!("{pz}.attn"), qz, kv, text_mask.as_deref(), None);
            let v1 = tape.add(v, av);
            let z1 = tape.add(z, az);
            let n = self.ln(tape, p, &format!("{pv}.ln2"), v1);
            let f = self.ffn(tape, p, &format!("{pv}.ffn"), n);
            v = tape.add(v1, f);
            let n = self.ln(tape, p, &format!("{pz}.ln2"), z1);
            let f = self.ffn(tape, p, &format!("{pz}.ffn"), n);
            z = tape.add(z1, f);
        }
        (v, z)
    }

    fn conv(&self, tape: &mut Tape, p: &BoundParams, path: &str, x: Var, valid: usize) -> Var {
        tape.conv1d_replicate(
            x,
            p.get(&format!("det.{path}.w")),
            p.get(&format!("det.{path}.b")),
            valid,
        )
    }

    /// Gated mix of the language-guided (`v_u`) and language-agnostic (`v_t`)
    /// convolution pathways; `L×1` logits.
    pub fn detect(&self, tape: &mut Tape, p: &BoundParams, v_t: Var, v_u: Var, valid: usize) -> Var {
        let pre = self.conv(tape, p, "pre", v_t, valid);
        let post = self.conv(tape, p, "post", v_u, valid);
        let g = tape.sigmoid(p.get("det.gate"));
        let one_minus = tape.one_minus(g);
        let a = tape.scale_by(post, g);
        let b = tape.scale_by(pre, one_minus);
        tape.add(a, b)
    }

    /// Language-agnostic pathway only.
    pub fn detect_agnostic(&self, tape: &mut Tape, p: &BoundParams, v_t: Var, valid: usize) -> Var {
        self.conv(tape, p, "pre", v_t, valid)
    }

    /// Cosine similarity between projected video steps and projected classes.
    pub fn classify(&self, tape: &mut Tape, p: &BoundParams, v_u: Var, z_u: Var) -> Var {
        let pv = tape.matmul(v_u, p.get("cls.vid"));
        let pz = tape.matmul(z_u, p.get("cls.txt"));
        let nv = tape.row_normalize(pv, NORM_EPS);
        let nz = tape.row_normalize(pz, NORM_EPS);
        tape.matmul_nt(nv, nz)
    }

    /// Full pass for one sequence given already projected text features `z_t`.
    pub fn forward_with_text(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        valid: usize,
        z_t: Var,
        language_guided: bool,
    ) -> ForwardVars {
        let v_t = self.encode_video(tape, p, x, valid);
        let (v_u, z_u) = self.fuse(tape, p, v_t, z_t, valid);
        let y_bin = if language_guided {
            self.detect(tape, p, v_t, v_u, valid)
        } else {
            self.detect_agnostic(tape, p, v_t, valid)
        };
        let y_mul = self.classify(tape, p, v_u, z_u);
        ForwardVars {
            v_t,
            v_u,
            z_t,
            z_u,
            y_bin,
            y_mul,
        }
    }

    /// Full pass from raw features (`L×E`) and raw class embeddings (`C×E`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        valid: usize,
        text_raw: Var,
        language_guided: bool,
    ) -> ForwardVars {
        let z_t = self.project_input(tape, p, text_raw);
        self.forward_with_text(tape, p, x, valid, z_t, language_guided)
    }

    /// Inference on one video.
    pub fn score(
        &self,
        seq: &FeatureSequence,
        definition: &AnomalyDefinition,
        text: &TextEncoder,
        language_guided: bool,
    ) -> Result<ScoreResult> {
        if seq.dim() != self.arch.embed_dim {
            return Err(Error::invalid(format!(
                "{}: feature width {} but model expects {}",
                seq.video_id,
                seq.dim(),
                self.arch.embed_dim
            )));
        }
        let x = seq.to_mat();
        if !x.is_finite() {
            return Err(Error::NonFinite(seq.video_id.clone()));
        }
        let raw = text.embed(definition)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let tv = tape.constant(raw);
        let out = self.forward(&mut tape, &p, xv, seq.len(), tv, language_guided);
        let y_bin = tape.value(out.y_bin).data().to_vec();
        let y_mul = tape.value(out.y_mul).clone();
        let video_class_probs = video_class_probs(&y_mul, definition);
        Ok(ScoreResult {
            y_bin,
            y_mul,
            video_class_probs,
            definition_used: definition.clone(),
        })
    }
}

fn attention_params(init: &mut Init<'_>, prefix: &str, h: usize) {
    for part in ["q", "k", "v", "o"] {
        init.linear(&format!("{prefix}.{part}"), h, h);
    }
}

fn ffn_params(init: &mut Init<'_>, prefix: &str, h: usize) {
    init.linear(&format!("{prefix}.1"), h, FFN_MULT * h);
    init.linear(&format!("{prefix}.2"), FFN_MULT * h, h);
}

/// Video-level class probabilities: the temporal minimum of the normal
/// column and the temporal maximum of every abnormal column, softmaxed.
pub fn video_class_probs(y_mul: &Mat, definition: &AnomalyDefinition) -> Vec<f64> {
    let (l, c) = y_mul.shape();
    assert_eq!(c, definition.num_classes(), "y_mul width vs definition");
    assert!(l >= 1);
    let normal = definition.normal_index();
    let logits: Vec<f64> = (0..c)
        .map(|j| {
            let col = (0..l).map(|t| y_mul.get(t, j));
            if j == normal {
                col.fold(f64::INFINITY, f64::min)
            } else {
                col.fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect();
    softmax(&logits)
}
