//! Seeded synthetic benchmark standing in for real video features.
//!
//! Each category `c` gets a unit prototype `t_c`; the background is a unit
//! vector `b`. Prototypes and background are drawn as mutually orthogonal
//! directions whenever the embedding width allows. Normal steps are `b + noise`. An abnormal video of class `c`
//! carries one contiguous segment of `normalize(b + t_c) + noise` steps.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, FeatureRepository};
use crate::error::{Error, Result};
use crate::rng::{make_substream, streams, Rng};
use crate::tensor::l2_normalize;
use crate::types::{
    AnomalyDefinition, ClassEntry, FeatureSequence, Split, VideoRecord, NORMAL_LABEL,
};

const CLASS_NAMES: &[&str] = &[
    "fighting",
    "explosion",
    "robbery",
    "arson",
    "shooting",
    "burglary",
    "vandalism",
    "accident",
    "shoplifting",
    "assault",
    "abuse",
    "arrest",
    "stealing",
];

const SUBJECTS: &[&str] = &[
    "a man",
    "two people",
    "a group of people",
    "a driver",
    "someone",
    "a woman",
];
const LINKS: &[&str] = &["involved in", "caught during", "seen in", "captured in"];
const PLACES: &[&str] = &[
    "on a street",
    "in a parking lot",
    "inside a store",
    "near a building",
    "at night",
    "in a hallway",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_categories: usize,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub embed_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Range of the anomalous fraction of an abnormal video.
    pub anomaly_fraction: (f64, f64),
    /// Probability that a generated video is abnormal.
    pub abnormal_ratio: f64,
    pub noise: f64,
    pub stride_frames: u32,
    pub fps: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_categories: 5,
            train_videos: 200,
            val_videos: 50,
            test_videos: 50,
            embed_dim: 32,
            min_len: 20,
            max_len: 60,
            anomaly_fraction: (0.2, 0.6),
            abnormal_ratio: 0.5,
            noise: 0.05,
            stride_frames: 8,
            fps: 30.0,
            seed: 0,
        }
    }
}

fn bad(field: &'static str, reason: &str) -> Error {
    Error::Config {
        field,
        reason: reason.into(),
    }
}

impl SyntheticSpec {
    pub fn validate(self) -> Result<Self> {
        if self.num_categories == 0 {
            return Err(bad("num_categories", "must be >= 1"));
        }
        if self.embed_dim < 2 {
            return Err(bad("embed_dim", "must be >= 2"));
        }
        if self.min_len < 4 {
            return Err(bad("min_len", "must be >= 4"));
        }
        if self.max_len < self.min_len {
            return Err(bad("max_len", "must be >= min_len"));
        }
        let (lo, hi) = self.anomaly_fraction;
        if !(lo > 0.0 && hi < 1.0 && lo <= hi) {
            return Err(bad("anomaly_fraction", "need 0 < low <= high < 1"));
        }
        if !(0.0..=1.0).contains(&self.abnormal_ratio) {
            return Err(bad("abnormal_ratio", "must be in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(bad("noise", "must be >= 0"));
        }
        if self.stride_frames == 0 {
            return Err(bad("stride_frames", "must be >= 1"));
        }
        if !(self.fps > 0.0) {
            return Err(bad("fps", "must be > 0"));
        }
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeClass {
    pub class_id: String,
    pub name: String,
    pub vector: Vec<f64>,
}

/// Category prototypes plus the normal background, shared with the toy text
/// encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub dim: usize,
    pub background: Vec<f64>,
    pub classes: Vec<PrototypeClass>,
}

impl Prototypes {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn class(&self, class_id: &str) -> Option<&PrototypeClass> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    /// Class-name definition over every category plus the normal class.
    pub fn class_name_definition(&self) -> AnomalyDefinition {
        let entries = self
            .classes
            .iter()
            .map(|c| ClassEntry::new(c.class_id.clone(), c.name.clone()))
            .collect();
        AnomalyDefinition::with_normal(entries)
            .expect("prototype classes are unique")
            .named("taxonomy")
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub records: Vec<VideoRecord>,
    pub sequences: Vec<FeatureSequence>,
    pub prototypes: Prototypes,
}

impl SyntheticDataset {
    /// Write `manifest.jsonl`, `features/`, `prototypes.json` and
    /// `definition.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, FeatureRepository)> {
        std::fs::create_dir_all(dir)?;
        let mut repo = FeatureRepository::create(dir.join("features"), self.prototypes.dim)?;
        for s in &self.sequences {
            repo.write_features(s)?;
        }
        let manifest = dir.join("manifest.jsonl");
        write_manifest(&manifest, &self.records)?;
        self.prototypes.save(&dir.join("prototypes.json"))?;
        std::fs::write(
            dir.join("definition.json"),
            self.prototypes.class_name_definition().to_json(),
        )?;
        Ok((manifest, repo))
    }

    pub fn sequence(&self, video_id: &str) -> Option<&FeatureSequence> {
        self.sequences.iter().find(|s| s.video_id == video_id)
    }
}

fn unit_gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    l2_normalize(&mut v);
    v
}

fn class_name(c: usize) -> String {
    match CLASS_NAMES.get(c) {
        Some(n) => (*n).to_string(),
        None => format!("anomaly{c}"),
    }
}

fn describe(rng: &mut Rng, name: &str) -> String {
    let s = SUBJECTS[rng.random_range(0..SUBJECTS.len())];
    let l = LINKS[rng.random_range(0..LINKS.len())];
    let p = PLACES[rng.random_range(0..PLACES.len())];
    format!("{s} {l} {name} {p}")
}

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let spec = spec.clone().validate()?;
    let mut rng = make_substream(spec.seed, streams::SYNTHETIC);
    let dim = spec.embed_dim;
    let mut drawn: Vec<Vec<f64>> = Vec::with_capacity(spec.num_categories + 1);
    for _ in 0..=spec.num_categories {
        let mut v = unit_gaussian(&mut rng, dim);
        // mutually orthogonal while the width allows it
        if drawn.len() < dim {
            for u in &drawn {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            l2_normalize(&mut v);
        }
        drawn.push(v);
    }
    let background = drawn.remove(0);
    let classes: Vec<PrototypeClass> = drawn
        .into_iter()
        .enumerate()
        .map(|(c, vector)| PrototypeClass {
            class_id: format!("c{c}"),
            name: class_name(c),
            vector,
        })
        .collect();
    let anomalous: Vec<Vec<f64>> = classes
        .iter()
        .map(|c| {
            let mut v: Vec<f64> = background.iter().zip(&c.vector).map(|(a, b)| a + b).collect();
            l2_normalize(&mut v);
            v
        })
        .collect();

    let mut records = Vec::new();
    let mut sequences = Vec::new();
    let splits = [
        (Split::Train, spec.train_videos),
        (Split::Val, spec.val_videos),
        (Split::Test, spec.test_videos),
    ];
    for (split, count) in splits {
        for i in 0..count {
            let video_id = format!("{split}_{i:04}");
            let len = rng.random_range(spec.min_len..=spec.max_len);
            let abnormal = rng.random::<f64>() < spec.abnormal_ratio;
            let mut labels = vec![0u8; len];
            let mut class = None;
            if abnormal {
                let c = rng.random_range(0..spec.num_categories);
                let (lo, hi) = spec.anomaly_fraction;
                let frac = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let seg = ((frac * len as f64).round() as usize).clamp(1, len - 1);
                let start = rng.random_range(0..=len - seg);
                labels[start..start + seg].iter_mut().for_each(|v| *v = 1);
                class = Some(c);
            }
            let mut rows = Vec::with_capacity(len);
            for &lab in &labels {
                let base = match (lab, class) {
                    (1, Some(c)) => &anomalous[c],
                    _ => &background,
                };
                let row: Vec<f64> = base
                    .iter()
                    .map(|&b| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        b + spec.noise * n
                    })
                    .collect();
                rows.push(row);
            }
            let data: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
            let seq = FeatureSequence::new(
                video_id.clone(),
                len,
                dim,
                data,
                spec.stride_frames,
                spec.fps,
            )?;
            let (label, description) = match class {
                Some(c) => (
                    classes[c].class_id.clone(),
                    Some(describe(&mut rng, &classes[c].name)),
                ),
                None => (NORMAL_LABEL.to_string(), None),
            };
            records.push(VideoRecord {
                video_id,
                split,
                label,
                description,
                frame_labels: Some(labels),
            });
            sequences.push(seq);
        }
    }
    Ok(SyntheticDataset {
        records,
        sequences,
        prototypes: Prototypes {
            dim,
            background,
            classes,
        },
    })
}
