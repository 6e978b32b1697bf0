//! Training objectives on tape variables.
//!
//! Every function reads only the first `valid` rows of its per-sample
//! inputs, so padded steps never reach a loss.

use crate::autograd::{Tape, Var};
use crate::config::{topk_size, Config};
use crate::error::{Error, Result};

/// Log arguments are clamped to `[LOG_LO, 1 - LOG_LO]`.
pub const LOG_LO: f64 = 1e-8;
const LOG_HI: f64 = 1.0 - LOG_LO;
const NORM_EPS: f64 = 1e-12;

/// Tape views of one sample's forward pass plus its targets.
#[derive(Clone, Debug)]
pub struct SampleView {
    /// `L×1` anomaly logits.
    pub y_bin: Var,
    /// `L×C` class similarities.
    pub y_mul: Var,
    /// `L×H` pre-fusion video features.
    pub v_t: Var,
    pub valid: usize,
    pub pseudo_label: Vec<u8>,
    pub abnormal: bool,
    /// Row of the batch definition this sample is labelled with.
    pub class_index: usize,
    /// Number of clips the sample was synthesized from.
    pub segment_count: usize,
}

/// One batch: per-sample views sharing a `C×H` pre-fusion text matrix.
#[derive(Clone, Debug)]
pub struct BatchViews {
    pub samples: Vec<SampleView>,
    pub z_t: Var,
}

impl BatchViews {
    /// Batch size.
    pub fn b1(&self) -> usize {
        self.samples.len()
    }

    /// Abnormal count.
    pub fn b2(&self) -> usize {
        self.samples.iter().filter(|s| s.abnormal).count()
    }
}

/// Per-term loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mil: f64,
    pub align: f64,
    pub dvs: f64,
    pub neg: f64,
}

/// Indices among `candidates` holding the `k` largest `values`; ties keep the
/// earlier index.
pub fn topk_indices(values: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut idx = candidates.to_vec();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn logits(tape: &Tape, y: Var, valid: usize) -> Vec<f64> {
    tape.value(y).data()[..valid].to_vec()
}

fn check_valid(tape: &Tape, x: Var, valid: usize) -> Result<()> {
    if valid == 0 || valid > tape.shape(x).0 {
        return Err(Error::invalid(format!(
            "valid length {valid} outside 1..={}",
            tape.shape(x).0
        )));
    }
    Ok(())
}

/// Mean of `σ(y_bin)` over `idx`.
fn mean_sigmoid(tape: &mut Tape, y_bin: Var, idx: &[usize]) -> Var {
    let picked = tape.gather(y_bin, idx);
    let s = tape.sigmoid(picked);
    tape.mean(s)
}

/// Binary cross-entropy of a probability against a 0/1 target.
fn bce(tape: &mut Tape, s: Var, target: bool) -> Var {
    let arg = if target { s } else { tape.one_minus(s) };
    let l = tape.log_clamped(arg, LOG_LO, LOG_HI);
    tape.scale(l, -1.0)
}

/// Top-k multiple-instance loss on `L×1` logits.
pub fn mil_loss(tape: &mut Tape, y_bin: Var, abnormal: bool, valid: usize, divisor: usize) -> Result<Var> {
    check_valid(tape, y_bin, valid)?;
    let k = topk_size(valid, divisor);
    let all: Vec<usize> = (0..valid).collect();
    let idx = topk_indices(&logits(tape, y_bin, valid), &all, k);
    let s = mean_sigmoid(tape, y_bin, &idx);
    Ok(bce(tape, s, abnormal))
}

/// Per-column top-k mean of `L×C` similarities as a `1×C` row.
fn topk_class_scores(tape: &mut Tape, y_mul: Var, valid: usize, divisor: usize) -> Var {
    let c = tape.shape(y_mul).1;
    let k = topk_size(valid, divisor);
    let all: Vec<usize> = (0..valid).collect();
    let scores: Vec<Var> = (0..c)
        .map(|col| {
            let column: Vec<f64> = (0..valid).map(|t| tape.value(y_mul).get(t, col)).collect();
            let idx: Vec<usize> = topk_indices(&column, &all, k)
                .into_iter()
                .map(|t| t * c + col)
                .collect();
            let picked = tape.gather(y_mul, &idx);
            tape.mean(picked)
        })
        .collect();
    tape.concat_cols(&scores)
}

/// Cross-entropy of the temperature-scaled top-k class scores.
pub fn mil_align_loss(
    tape: &mut Tape,
    y_mul: Var,
    class_index: usize,
    valid: usize,
    divisor: usize,
    temperature: f64,
) -> Result<Var> {
    check_valid(tape, y_mul, valid)?;
    let c = tape.shape(y_mul).1;
    if c < 2 {
        return Err(Error::invalid("classification needs at least two classes"));
    }
    if class_index >= c {
        return Err(Error::invalid(format!("class index {class_index} out of range for {c} classes")));
    }
    let s = topk_class_scores(tape, y_mul, valid, divisor);
    let s = tape.scale(s, 1.0 / temperature);
    let lp = tape.log_softmax_rows(s);
    let picked = tape.gather(lp, &[class_index]);
    let picked = tape.sum(picked);
    Ok(tape.scale(picked, -1.0))
}

/// Which parts of the synthesis loss to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DvsTerms {
    pub top_k: bool,
    pub pseudo_label: bool,
}

impl Default for DvsTerms {
    fn default() -> Self {
        DvsTerms {
            top_k: true,
            pseudo_label: true,
        }
    }
}

/// Synthesis loss: top-k restricted to the pseudo-labelled region for
/// abnormal samples, plain top-k for normal ones, plus per-step supervision
/// from the pseudo-label.
pub fn dvs_loss(
    tape: &mut Tape,
    y_bin: Var,
    pseudo_label: &[u8],
    abnormal: bool,
    valid: usize,
    divisor: usize,
    terms: DvsTerms,
) -> Result<Var> {
    check_valid(tape, y_bin, valid)?;
    if pseudo_label.len() < valid {
        return Err(Error::invalid(format!(
            "pseudo-label has {} steps, expected {valid}",
            pseudo_label.len()
        )));
    }
    let ys = logits(tape, y_bin, valid);
    let k = topk_size(valid, divisor);
    let region: Vec<usize> = (0..valid).filter(|&t| pseudo_label[t] == 1).collect();
    let mut parts = Vec::new();
    if terms.top_k {
        if abnormal {
            if region.is_empty() {
                return Err(Error::invalid("abnormal synthesized sample without pseudo-labelled steps"));
            }
            let idx = topk_indices(&ys, &region, k.min(region.len()));
            let s = mean_sigmoid(tape, y_bin, &idx);
            parts.push(bce(tape, s, true));
        } else {
            let all: Vec<usize> = (0..valid).collect();
            let idx = topk_indices(&ys, &all, k);
            let s = mean_sigmoid(tape, y_bin, &idx);
            parts.push(bce(tape, s, false));
        }
    }
    if terms.pseudo_label && !region.is_empty() {
        let picked = tape.gather(y_bin, &region);
        let s = tape.sigmoid(picked);
        let l = tape.log_clamped(s, LOG_LO, LOG_HI);
        let l = tape.sum(l);
        parts.push(tape.scale(l, -1.0 / valid as f64));
    }
    Ok(match parts.len() {
        0 => tape.constant(crate::Mat::scalar(0.0)),
        1 => parts[0],
        _ => tape.add(parts[0], parts[1]),
    })
}

/// Score-weighted foreground and background features, each `1×H`.
pub fn aggregate_pos_neg(tape: &mut Tape, v_t: Var, y_bin: Var, eta: f64, valid: usize) -> Result<(Var, Var)> {
    check_valid(tape, y_bin, valid)?;
    let rows: Vec<usize> = (0..valid).collect();
    let (y, v) = if valid == tape.shape(y_bin).0 && valid == tape.shape(v_t).0 {
        (y_bin, v_t)
    } else {
        (tape.gather_rows(y_bin, &rows), tape.gather_rows(v_t, &rows))
    };
    let yt = tape.transpose(y);
    let pos_logits = tape.scale(yt, 1.0 / eta);
    let neg_logits = tape.scale(yt, -1.0 / eta);
    let wp = tape.softmax_rows(pos_logits, None);
    let wn = tape.softmax_rows(neg_logits, None);
    Ok((tape.matmul(wp, v), tape.matmul(wn, v)))
}

/// Contrastive loss between abnormal texts and aggregated video features with
/// each abnormal sample's background as a hard negative.
///
/// `pos_abnormal[i]` pairs with text row `i` of `texts` (`B2×H`). Video rows
/// are stacked as `[pos_abnormal | pos_normal | neg_abnormal]`.
pub fn contrastive_neg_loss(
    tape: &mut Tape,
    pos_abnormal: &[Var],
    pos_normal: &[Var],
    neg_abnormal: &[Var],
    texts: Var,
    tau: f64,
) -> Result<Var> {
    let b2 = pos_abnormal.len();
    if b2 == 0 {
        return Ok(tape.constant(crate::Mat::scalar(0.0)));
    }
    if neg_abnormal.len() != b2 || tape.shape(texts).0 != b2 {
        return Err(Error::invalid("hard negatives and texts must match the abnormal count"));
    }
    let rows: Vec<Var> = pos_abnormal
        .iter()
        .chain(pos_normal)
        .chain(neg_abnormal)
        .copied()
        .collect();
    let v = tape.concat_rows(&rows);
    let vn = tape.row_normalize(v, NORM_EPS);
    let zn = tape.row_normalize(texts, NORM_EPS);
    let s = tape.matmul_nt(vn, zn);
    neg_loss_from_similarity(tape, s, tau)
}

/// Contrastive loss from the `(B1+B2)×B2` cosine matrix whose first `B2` rows
/// are the matching positives.
pub fn neg_loss_from_similarity(tape: &mut Tape, s: Var, tau: f64) -> Result<Var> {
    let (total, b2) = tape.shape(s);
    if b2 == 0 {
        return Ok(tape.constant(crate::Mat::scalar(0.0)));
    }
    if total < b2 {
        return Err(Error::invalid("similarity matrix has fewer video rows than texts"));
    }
    let s = tape.scale(s, 1.0 / tau);
    // text -> video: each text column against every video row
    let st = tape.transpose(s);
    let lt = tape.log_softmax_rows(st);
    let t2v_idx: Vec<usize> = (0..b2).map(|i| i * total + i).collect();
    let t2v = tape.gather(lt, &t2v_idx);
    let t2v = tape.sum(t2v);
    // video -> text: each abnormal positive row against every text
    let top: Vec<usize> = (0..b2).collect();
    let sv = tape.gather_rows(s, &top);
    let lv = tape.log_softmax_rows(sv);
    let diag: Vec<usize> = (0..b2).map(|i| i * b2 + i).collect();
    let v2t = tape.gather(lv, &diag);
    let v2t = tape.sum(v2t);
    let both = tape.add(t2v, v2t);
    Ok(tape.scale(both, -1.0))
}

/// Unweighted sum of the four objectives. Per-sample terms are averaged over
/// the batch; the contrastive term is summed over abnormal texts.
pub fn total_loss(tape: &mut Tape, batch: &BatchViews, cfg: &Config) -> Result<(Var, LossBreakdown)> {
    if batch.samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let inv_b = 1.0 / batch.b1() as f64;
    let mut mil = Vec::new();
    let mut align = Vec::new();
    let mut dvs = Vec::new();
    for s in &batch.samples {
        mil.push(mil_loss(tape, s.y_bin, s.abnormal, s.valid, cfg.topk_divisor)?);
        align.push(mil_align_loss(
            tape,
            s.y_mul,
            s.class_index,
            s.valid,
            cfg.topk_divisor,
            cfg.mil_align_temperature,
        )?);
        if cfg.use_dvs {
            let terms = DvsTerms {
                top_k: true,
                pseudo_label: !(cfg.restrict_dvs_third_term_to_m_gt_1 && s.segment_count <= 1),
            };
            dvs.push(dvs_loss(
                tape,
                s.y_bin,
                &s.pseudo_label,
                s.abnormal,
                s.valid,
                cfg.topk_divisor,
                terms,
            )?);
        }
    }
    let mean_of = |tape: &mut Tape, xs: &[Var]| -> Var {
        if xs.is_empty() {
            return tape.constant(crate::Mat::scalar(0.0));
        }
        let col = tape.concat_rows(xs);
        let s = tape.sum(col);
        tape.scale(s, inv_b)
    };
    let l_mil = mean_of(tape, &mil);
    let l_align = mean_of(tape, &align);
    let l_dvs = mean_of(tape, &dvs);
    let l_neg = if cfg.use_neg {
        let mut pos_abn = Vec::new();
        let mut pos_norm = Vec::new();
        let mut neg_abn = Vec::new();
        let mut text_rows = Vec::new();
        for s in &batch.samples {
            let (p, n) = aggregate_pos_neg(tape, s.v_t, s.y_bin, cfg.eta, s.valid)?;
            if s.abnormal {
                pos_abn.push(p);
                neg_abn.push(n);
                text_rows.push(s.class_index);
            } else {
                pos_norm.push(p);
            }
        }
        if pos_abn.is_empty() {
            tape.constant(crate::Mat::scalar(0.0))
        } else {
            let texts = tape.gather_rows(batch.z_t, &text_rows);
            contrastive_neg_loss(tape, &pos_abn, &pos_norm, &neg_abn, texts, cfg.tau)?
        }
    } else {
        tape.constant(crate::Mat::scalar(0.0))
    };
    let a = tape.add(l_mil, l_align);
    let b = tape.add(l_dvs, l_neg);
    let total = tape.add(a, b);
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        mil: tape.value(l_mil).item(),
        align: tape.value(l_align).item(),
        dvs: tape.value(l_dvs).item(),
        neg: tape.value(l_neg).item(),
    };
    Ok((total, breakdown))
}
