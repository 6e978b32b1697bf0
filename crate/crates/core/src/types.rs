//! Domain types shared by every stage of the pipeline.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Label value marking a normal video in manifests.
pub const NORMAL_LABEL: &str = "normal";

/// Default prompt of the normal class.
pub const DEFAULT_NORMAL_PROMPT: &str = "normal scene with ordinary activities";

/// Default source frames per feature step.
pub const DEFAULT_STRIDE_FRAMES: u32 = 8;

/// Per-video `L×E` feature matrix stored as `f32`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    len: usize,
    dim: usize,
    data: Vec<f32>,
    pub stride_frames: u32,
    pub fps: f32,
}

impl FeatureSequence {
    pub fn new(
        video_id: impl Into<String>,
        len: usize,
        dim: usize,
        data: Vec<f32>,
        stride_frames: u32,
        fps: f32,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if len == 0 || dim == 0 {
            return Err(Error::invalid(format!("{video_id}: empty feature sequence")));
        }
        if data.len() != len * dim {
            return Err(Error::invalid(format!(
                "{video_id}: {} values for a {len}x{dim} sequence",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(video_id));
        }
        if stride_frames == 0 || !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::invalid(format!("{video_id}: stride and fps must be positive")));
        }
        Ok(FeatureSequence {
            video_id,
            len,
            dim,
            data,
            stride_frames,
            fps,
        })
    }

    /// Build from `f64` rows, rounding each value to `f32`.
    pub fn from_rows(video_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let len = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        FeatureSequence::new(video_id, len, dim, data, DEFAULT_STRIDE_FRAMES, 30.0)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.len, self.dim, self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn duration_s(&self) -> f64 {
        self.len as f64 * self.stride_frames as f64 / self.fps as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: String,
    #[serde(default)]
    pub prompt_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl ClassEntry {
    pub fn new(class_id: impl Into<String>, prompt_text: impl Into<String>) -> Self {
        ClassEntry {
            class_id: class_id.into(),
            prompt_text: prompt_text.into(),
            embedding: None,
        }
    }

    pub fn normal() -> Self {
        ClassEntry::new(NORMAL_LABEL, DEFAULT_NORMAL_PROMPT)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDefinition {
    #[serde(default)]
    name: Option<String>,
    classes: Vec<ClassEntry>,
    normal_index: usize,
}

/// Ordered class prompts with exactly one normal entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDefinition")]
pub struct AnomalyDefinition {
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    classes: Vec<ClassEntry>,
    normal_index: usize,
}

impl TryFrom<RawDefinition> for AnomalyDefinition {
    type Error = Error;

    fn try_from(raw: RawDefinition) -> Result<Self> {
        let mut def = AnomalyDefinition::new(raw.classes, raw.normal_index)?;
        def.name = raw.name;
        Ok(def)
    }
}

impl AnomalyDefinition {
    pub fn new(classes: Vec<ClassEntry>, normal_index: usize) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::invalid("definition needs at least two classes"));
        }
        if normal_index >= classes.len() {
            return Err(Error::invalid(format!(
                "normal_index {normal_index} out of range for {} classes",
                classes.len()
            )));
        }
        let mut seen = HashSet::new();
        for c in &classes {
            if c.class_id.is_empty() {
                return Err(Error::invalid("empty class_id"));
            }
            if !seen.insert(c.class_id.as_str()) {
                return Err(Error::invalid(format!("duplicate class_id `{}`", c.class_id)));
            }
            match &c.embedding {
                None if c.prompt_text.trim().is_empty() => {
                    return Err(Error::invalid(format!(
                        "class `{}` has neither prompt_text nor embedding",
                        c.class_id
                    )))
                }
                Some(e) if e.is_empty() || e.iter().any(|v| !v.is_finite()) => {
                    return Err(Error::invalid(format!(
                        "class `{}` has an empty or non-finite embedding",
                        c.class_id
                    )))
                }
                _ => {}
            }
        }
        Ok(AnomalyDefinition {
            name: None,
            classes,
            normal_index,
        })
    }

    /// Abnormal entries followed by the default normal entry.
    pub fn with_normal(abnormal: Vec<ClassEntry>) -> Result<Self> {
        let normal_index = abnormal.len();
        let mut classes = abnormal;
        classes.push(ClassEntry::normal());
        AnomalyDefinition::new(classes, normal_index)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn normal_index(&self) -> usize {
        self.normal_index
    }

    pub fn index_of(&self, class_id: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.class_id == class_id)
    }

    /// Target index of a manifest label: its class, or the normal class when the
    /// label is normal or not part of this definition.
    pub fn target_index(&self, label: &str) -> usize {
        if label == NORMAL_LABEL {
            return self.normal_index;
        }
        self.index_of(label).unwrap_or(self.normal_index)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        AnomalyDefinition::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("definition serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub video_id: String,
    pub split: Split,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels: Option<Vec<u8>>,
}

impl VideoRecord {
    pub fn is_abnormal(&self) -> bool {
        self.label != NORMAL_LABEL
    }

    /// Row-level invariants; `len` cross-checks frame labels when known.
    pub fn validate(&self, len: Option<usize>) -> Result<()> {
        if self.video_id.is_empty() {
            return Err(Error::invalid("empty video_id"));
        }
        if self.label.is_empty() {
            return Err(Error::invalid(format!("{}: empty label", self.video_id)));
        }
        if self.split == Split::Train {
            let has_desc = self.description.as_deref().is_some_and(|d| !d.trim().is_empty());
            if self.is_abnormal() && !has_desc {
                return Err(Error::invalid(format!(
                    "{}: abnormal training video without description",
                    self.video_id
                )));
            }
            if !self.is_abnormal() && self.description.is_some() {
                return Err(Error::invalid(format!(
                    "{}: normal training video with a description",
                    self.video_id
                )));
            }
        }
        if let Some(fl) = &self.frame_labels {
            if fl.iter().any(|&v| v > 1) {
                return Err(Error::invalid(format!("{}: frame_labels must be 0/1", self.video_id)));
            }
            if let Some(l) = len {
                if fl.len() != l {
                    return Err(Error::invalid(format!(
                        "{}: {} frame labels for {l} feature steps",
                        self.video_id,
                        fl.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Model output for one video under one definition.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreResult {
    /// Per-step detection logits.
    pub y_bin: Vec<f64>,
    /// Per-step per-class cosine similarities, `L×C`.
    pub y_mul: Mat,
    pub video_class_probs: Vec<f64>,
    pub definition_used: AnomalyDefinition,
}

impl ScoreResult {
    pub fn frame_scores(&self) -> Vec<f64> {
        self.y_bin.iter().map(|&v| crate::tensor::sigmoid(v)).collect()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.video_class_probs)
    }
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definition_invariants() {
        assert!(AnomalyDefinition::new(vec![ClassEntry::normal()], 0).is_err());
        let dup = vec![ClassEntry::new("a", "x"), ClassEntry::new("a", "y")];
        assert!(AnomalyDefinition::new(dup, 0).is_err());
        let empty = vec![ClassEntry::new("a", ""), ClassEntry::normal()];
        assert!(AnomalyDefinition::new(empty, 1).is_err());
        let mut with_emb = ClassEntry::new("a", "");
        with_emb.embedding = Some(vec![1.0, 0.0]);
        assert!(AnomalyDefinition::new(vec![with_emb, ClassEntry::normal()], 1).is_ok());
        assert!(AnomalyDefinition::new(vec![ClassEntry::new("a", "x"), ClassEntry::normal()], 2).is_err());
    }

    #[test]
    fn definition_json_schema() {
        let text = r#"{"classes":[{"class_id":"fight","prompt_text":"people fighting"},
            {"class_id":"normal","prompt_text":"normal scene"}],"normal_index":1}"#;
        let d = AnomalyDefinition::from_json(text).unwrap();
        assert_eq!(d.num_classes(), 2);
        assert_eq!(d.target_index("fight"), 0);
        assert_eq!(d.target_index("normal"), 1);
        assert_eq!(d.target_index("unlisted"), 1);
        let back = AnomalyDefinition::from_json(&d.to_json()).unwrap();
        assert_eq!(back, d);
        let bad = r#"{"classes":[{"class_id":"a","prompt_text":"x"}],"normal_index":0}"#;
        assert!(AnomalyDefinition::from_json(bad).is_err());
    }

    #[test]
    fn record_invariants() {
        let mut r = VideoRecord {
            video_id: "v".into(),
            split: Split::Train,
            label: "c0".into(),
            description: None,
            frame_labels: None,
        };
        assert!(r.validate(None).is_err());
        r.description = Some("something happens".into());
        assert!(r.validate(None).is_ok());
        r.frame_labels = Some(vec![0, 1, 1]);
        assert!(r.validate(Some(3)).is_ok());
        assert!(r.validate(Some(4)).is_err());
        r.split = Split::Test;
        r.description = None;
        assert!(r.validate(Some(3)).is_ok());
    }

    #[test]
    fn feature_sequence_checks() {
        assert!(FeatureSequence::new("a", 2, 2, vec![0.0; 3], 8, 30.0).is_err());
        assert!(FeatureSequence::new("a", 1, 2, vec![0.0, f32::NAN], 8, 30.0).is_err());
        let s = FeatureSequence::new("a", 2, 2, vec![1.0, 2.0, 3.0, 4.0], 8, 30.0).unwrap();
        assert_eq!(s.row(1), &[3.0, 4.0]);
        assert_eq!(s.to_mat().get(1, 0), 3.0);
    }
}
