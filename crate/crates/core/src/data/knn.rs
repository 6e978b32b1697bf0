use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FeatureRepository;
use crate::error::{Error, Result};
use crate::tensor::cosine;
use crate::types::{FeatureSequence, Split, VideoRecord};

/// Row `⌊L/2⌋` as `f64`; even lengths take the later of the two middle steps.
pub fn central_step_feature(seq: &FeatureSequence) -> Vec<f64> {
    seq.row(seq.len() / 2).iter().map(|&v| v as f64).collect()
}

/// Nearest normal training videos per training video, nearest first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KnnIndex {
    neighbors: BTreeMap<String, Vec<String>>,
}

impl KnnIndex {
    pub fn from_map(neighbors: BTreeMap<String, Vec<String>>) -> Self {
        KnnIndex { neighbors }
    }

    pub fn neighbors(&self, video_id: &str) -> Option<&[String]> {
        self.neighbors.get(video_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.neighbors.iter()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Rank the normal training videos for every training video by cosine
/// similarity of central-step features; ties go to the smaller id.
pub fn build_knn_index(repo: &FeatureRepository, manifest: &[VideoRecord], n: usize) -> Result<KnnIndex> {
    let mut train: Vec<&VideoRecord> = manifest.iter().filter(|r| r.split == Split::Train).collect();
    train.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let mut centers = BTreeMap::new();
    for r in &train {
        centers.insert(r.video_id.as_str(), central_step_feature(&repo.read_features(&r.video_id)?));
    }
    let normals: Vec<&str> = train
        .iter()
        .filter(|r| !r.is_abnormal())
        .map(|r| r.video_id.as_str())
        .collect();
    if normals.is_empty() {
        return Err(Error::invalid("no normal training videos for the neighbour index"));
    }
    if normals.len() < n + 1 {
        log::warn!(
            "only {} normal training videos; neighbour lists truncated below n = {n}",
            normals.len()
        );
    }
    let mut neighbors = BTreeMap::new();
    for r in &train {
        let q = &centers[r.video_id.as_str()];
        let mut ranked: Vec<(f64, &str)> = normals
            .iter()
            .filter(|&&id| id != r.video_id)
            .map(|&id| (cosine(q, &centers[id]), id))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        ranked.truncate(n);
        neighbors.insert(
            r.video_id.clone(),
            ranked.into_iter().map(|(_, id)| id.to_string()).collect(),
        );
    }
    Ok(KnnIndex { neighbors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticSpec};

    fn rec(id: &str, abnormal: bool) -> VideoRecord {
        VideoRecord {
            video_id: id.into(),
            split: Split::Train,
            label: if abnormal { "c0".into() } else { "normal".into() },
            description: abnormal.then(|| "x".into()),
            frame_labels: None,
        }
    }

    #[test]
    fn central_step_convention() {
        let mk = |len: usize| {
            let data = (0..len).map(|i| i as f32).collect();
            FeatureSequence::new("s", len, 1, data, 8, 30.0).unwrap()
        };
        assert_eq!(central_step_feature(&mk(1)), vec![0.0]);
        assert_eq!(central_step_feature(&mk(5)), vec![2.0]);
        assert_eq!(central_step_feature(&mk(4)), vec![2.0]);
    }

    #[test]
    fn identical_videos_are_nearest() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = FeatureRepository::create(dir.path(), 3).unwrap();
        let put = |repo: &mut FeatureRepository, id: &str, v: [f32; 3]| {
            repo.write_features(&FeatureSequence::new(id, 1, 3, v.to_vec(), 8, 30.0).unwrap())
                .unwrap();
        };
        put(&mut repo, "A", [1.0, 0.1, 0.0]);
        put(&mut repo, "B", [1.0, 0.1, 0.0]);
        put(&mut repo, "C", [-1.0, 0.0, 0.5]);
        let manifest = vec![rec("A", false), rec("B", false), rec("C", false)];
        let idx = build_knn_index(&repo, &manifest, 5).unwrap();
        assert_eq!(idx.neighbors("A").unwrap()[0], "B");
        // truncated: only two other normal videos exist
        assert_eq!(idx.neighbors("A").unwrap().len(), 2);
        for (id, ns) in idx.iter() {
            assert!(!ns.contains(id));
        }
    }

    #[test]
    fn no_normals_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = FeatureRepository::create(dir.path(), 1).unwrap();
        repo.write_features(&FeatureSequence::new("a", 1, 1, vec![1.0], 8, 30.0).unwrap())
            .unwrap();
        assert!(build_knn_index(&repo, &[rec("a", true)], 3).is_err());
    }

    /// Exhaustive all-pairs oracle, written independently of the index code.
    fn oracle(seqs: &[FeatureSequence], manifest: &[VideoRecord], n: usize) -> BTreeMap<String, Vec<String>> {
        let center = |s: &FeatureSequence| -> Vec<f64> {
            let mid = s.len() / 2;
            (0..s.dim()).map(|j| s.data()[mid * s.dim() + j] as f64).collect()
        };
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut out = BTreeMap::new();
        for q in manifest.iter().filter(|r| r.split == Split::Train) {
            let qs = seqs.iter().find(|s| s.video_id == q.video_id).unwrap();
            let mut all = Vec::new();
            for c in manifest.iter().filter(|r| r.split == Split::Train && !r.is_abnormal()) {
                if c.video_id == q.video_id {
                    continue;
                }
                let cs = seqs.iter().find(|s| s.video_id == c.video_id).unwrap();
                all.push((cos(&center(qs), &center(cs)), c.video_id.clone()));
            }
            // selection sort: highest similarity, then smallest id
            let mut picked = Vec::new();
            while !all.is_empty() && picked.len() < n {
                let mut best = 0;
                for i in 1..all.len() {
                    let better = all[i].0 > all[best].0 || (all[i].0 == all[best].0 && all[i].1 < all[best].1);
                    if better {
                        best = i;
                    }
                }
                picked.push(all.remove(best).1);
            }
            out.insert(q.video_id.clone(), picked);
        }
        out
    }

    #[test]
    fn matches_exhaustive_oracle() {
        for (videos, n) in [(10usize, 3usize), (40, 200), (60, 7)] {
            let spec = SyntheticSpec {
                train_videos: videos,
                val_videos: 0,
                test_videos: 0,
                noise: 0.3,
                seed: videos as u64,
                ..SyntheticSpec::default()
            };
            let ds = generate_synthetic_dataset(&spec).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let (_, repo) = ds.save(dir.path()).unwrap();
            let idx = build_knn_index(&repo, &ds.records, n).unwrap();
            assert_eq!(idx, KnnIndex::from_map(oracle(&ds.sequences, &ds.records, n)));
        }
    }

    #[test]
    fn json_round_trip() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec!["b".to_string(), "c".to_string()]);
        let idx = KnnIndex::from_map(m);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("knn.json");
        idx.save(&p).unwrap();
        assert_eq!(KnnIndex::load(&p).unwrap(), idx);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"a\""));
    }
}
