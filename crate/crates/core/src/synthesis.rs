//! Dynamic video synthesis.
//!
//! An anchor video (normal or abnormal) is placed at a random slot among
//! `m` segments; the other slots are filled with nearest normal neighbours of
//! the anchor. The pseudo-label marks the anchor slot when the anchor is
//! abnormal and is all-zero otherwise.

use std::collections::HashMap;

use rand::Rng as _;
use serde::Serialize;

use crate::config::Config;
use crate::data::KnnIndex;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::FeatureSequence;

/// Normal and abnormal training videos available to the synthesizer.
pub struct VideoPool<'a> {
    normal: Vec<&'a FeatureSequence>,
    abnormal: Vec<&'a FeatureSequence>,
    by_id: HashMap<&'a str, &'a FeatureSequence>,
}

impl<'a> VideoPool<'a> {
    pub fn new(normal: Vec<&'a FeatureSequence>, abnormal: Vec<&'a FeatureSequence>) -> Result<Self> {
        if normal.is_empty() || abnormal.is_empty() {
            return Err(Error::invalid(
                "synthesis needs at least one normal and one abnormal video",
            ));
        }
        let by_id = normal
            .iter()
            .chain(&abnormal)
            .map(|s| (s.video_id.as_str(), *s))
            .collect();
        Ok(VideoPool {
            normal,
            abnormal,
            by_id,
        })
    }

    pub fn get(&self, video_id: &str) -> Option<&'a FeatureSequence> {
        self.by_id.get(video_id).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedSample {
    pub features: FeatureSequence,
    pub pseudo_label: Vec<u8>,
    /// Video-level label: true when the anchor is abnormal.
    pub abnormal: bool,
    pub anchor_id: String,
    pub segment_count: usize,
    /// 1-based slot of the anchor.
    pub anchor_slot: usize,
    /// Half-open `(start, end)` step ranges per slot.
    pub segments: Vec<(usize, usize)>,
    pub sources: Vec<String>,
}

/// JSON-friendly provenance of a sample, for debug dumps.
#[derive(Clone, Debug, Serialize)]
pub struct Provenance<'a> {
    pub anchor_id: &'a str,
    pub abnormal: bool,
    pub segment_count: usize,
    pub anchor_slot: usize,
    pub segments: &'a [(usize, usize)],
    pub sources: &'a [String],
    pub total_len: usize,
}

impl SynthesizedSample {
    pub fn len(&self) -> usize {
        self.pseudo_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_label.is_empty()
    }

    pub fn provenance(&self) -> Provenance<'_> {
        Provenance {
            anchor_id: &self.anchor_id,
            abnormal: self.abnormal,
            segment_count: self.segment_count,
            anchor_slot: self.anchor_slot,
            segments: &self.segments,
            sources: &self.sources,
            total_len: self.len(),
        }
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self, max_segments: usize) -> std::result::Result<(), String> {
        let m = self.segment_count;
        if !(1..=max_segments).contains(&m) {
            return Err(format!("segment count {m} outside 1..={max_segments}"));
        }
        if !(1..=m).contains(&self.anchor_slot) {
            return Err(format!("anchor slot {} outside 1..={m}", self.anchor_slot));
        }
        if self.segments.len() != m || self.sources.len() != m {
            return Err("segment bookkeeping length mismatch".into());
        }
        let mut pos = 0;
        for &(s, e) in &self.segments {
            if s != pos || e <= s {
                return Err("segments are not contiguous".into());
            }
            pos = e;
        }
        if pos != self.len() || self.features.len() != self.len() {
            return Err("total length mismatch".into());
        }
        let (s, e) = self.segments[self.anchor_slot - 1];
        for (t, &p) in self.pseudo_label.iter().enumerate() {
            let want = u8::from(self.abnormal && (s..e).contains(&t));
            if p != want {
                return Err(format!("pseudo label wrong at step {t}"));
            }
        }
        Ok(())
    }
}

/// One draw of the synthesis procedure.
pub fn synthesize(pool: &VideoPool<'_>, knn: &KnnIndex, cfg: &Config, rng: &mut Rng) -> Result<SynthesizedSample> {
    let p1: f64 = rng.random();
    let p2: f64 = rng.random();
    let m = if p1 > cfg.theta {
        1
    } else {
        rng.random_range(1..=cfg.delta_m)
    };
    let (anchor, abnormal) = if p2 > cfg.alpha {
        (pool.abnormal[rng.random_range(0..pool.abnormal.len())], true)
    } else {
        (pool.normal[rng.random_range(0..pool.normal.len())], false)
    };
    let j = rng.random_range(1..=m);
    let neighbors = knn
        .neighbors(&anchor.video_id)
        .ok_or_else(|| Error::NotFound(format!("neighbour list for `{}`", anchor.video_id)))?;
    let neighbors = &neighbors[..neighbors.len().min(cfg.knn_n)];
    if m > 1 && neighbors.is_empty() {
        return Err(Error::invalid(format!("`{}` has no neighbours", anchor.video_id)));
    }

    let mut parts: Vec<&FeatureSequence> = Vec::with_capacity(m);
    for slot in 1..=m {
        if slot == j {
            parts.push(anchor);
        } else {
            let id = &neighbors[rng.random_range(0..neighbors.len())];
            let seq = pool
                .get(id)
                .ok_or_else(|| Error::NotFound(format!("neighbour video `{id}`")))?;
            parts.push(seq);
        }
    }

    let dim = anchor.dim();
    let total: usize = parts.iter().map(|s| s.len()).sum();
    let mut data = Vec::with_capacity(total * dim);
    let mut segments = Vec::with_capacity(m);
    let mut pseudo_label = Vec::with_capacity(total);
    for (slot, seq) in parts.iter().enumerate() {
        if seq.dim() != dim {
            return Err(Error::invalid("feature widths differ inside the pool"));
        }
        let start = pseudo_label.len();
        data.extend_from_slice(seq.data());
        let on = u8::from(abnormal && slot + 1 == j);
        pseudo_label.extend(std::iter::repeat_n(on, seq.len()));
        segments.push((start, pseudo_label.len()));
    }
    let features = FeatureSequence::new(
        format!("synth:{}", anchor.video_id),
        total,
        dim,
        data,
        anchor.stride_frames,
        anchor.fps,
    )?;
    Ok(SynthesizedSample {
        features,
        pseudo_label,
        abnormal,
        anchor_id: anchor.video_id.clone(),
        segment_count: m,
        anchor_slot: j,
        segments,
        sources: parts.iter().map(|s| s.video_id.clone()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthesisStats {
    pub fraction_multi_segment: f64,
    pub fraction_abnormal: f64,
    pub mean_len: f64,
    pub count: usize,
}

pub fn synthesis_statistics(samples: &[SynthesizedSample]) -> Result<SynthesisStats> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let n = samples.len() as f64;
    Ok(SynthesisStats {
        fraction_multi_segment: samples.iter().filter(|s| s.segment_count > 1).count() as f64 / n,
        fraction_abnormal: samples.iter().filter(|s| s.abnormal).count() as f64 / n,
        mean_len: samples.iter().map(|s| s.len() as f64).sum::<f64>() / n,
        count: samples.len(),
    })
}

/// Closed-form probability that a draw has more than one segment.
pub fn expected_multi_segment_probability(theta: f64, delta_m: usize) -> f64 {
    theta * (delta_m as f64 - 1.0) / delta_m as f64
}
