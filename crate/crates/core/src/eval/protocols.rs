//! Scoring whole manifests and the two evaluation protocols.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, FeatureRepository};
use crate::error::{Error, Result};
use crate::eval::metrics::{
    average_precision, expand_to_frames, min_max_normalize, multiclass_metrics, roc_auc,
};
use crate::model::{Model, TextEncoder};
use crate::types::{AnomalyDefinition, FeatureSequence, Split, VideoRecord, NORMAL_LABEL};

/// A frozen model plus the text encoder it was trained with.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub model: &'a Model,
    pub text: &'a TextEncoder,
    pub language_guided: bool,
}

/// Inference output of one video, as written to score dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    /// `σ(y_bin)` per feature step.
    pub frame_scores: Vec<f64>,
    pub class_probs: Vec<f64>,
    #[serde(default)]
    pub definition_name: Option<String>,
}

impl Scorer<'_> {
    /// Score every sequence under `definition`, spread over the available
    /// cores; output order follows the input.
    pub fn score_all(&self, seqs: &[&FeatureSequence], definition: &AnomalyDefinition) -> Result<Vec<VideoScore>> {
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seqs.len().max(1));
        let chunk = seqs.len().div_ceil(threads).max(1);
        let results: Vec<Result<Vec<VideoScore>>> = std::thread::scope(|s| {
            let handles: Vec<_> = seqs
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|seq| {
                                let r = self.model.score(seq, definition, self.text, self.language_guided)?;
                                Ok(VideoScore {
                                    video_id: seq.video_id.clone(),
                                    frame_scores: r.frame_scores(),
                                    class_probs: r.video_class_probs,
                                    definition_name: definition.name().map(str::to_string),
                                })
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("scoring thread panicked")).collect()
        });
        let mut out = Vec::with_capacity(seqs.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Concatenated per-frame scores and labels over every record with frame
/// labels. Step-granularity labels are used as is; longer label arrays are
/// frame-granularity and the step scores are expanded by the stride.
pub fn frame_level_inputs(
    records: &[VideoRecord],
    seqs: &[&FeatureSequence],
    scores: &[VideoScore],
) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    for ((rec, seq), sc) in records.iter().zip(seqs).zip(scores) {
        let Some(labels) = &rec.frame_labels else {
            continue;
        };
        let l = sc.frame_scores.len();
        if labels.len() == l {
            all_scores.extend_from_slice(&sc.frame_scores);
        } else if labels.len() > l {
            all_scores.extend(expand_to_frames(
                &sc.frame_scores,
                seq.stride_frames.max(1) as usize,
                labels.len(),
            ));
        } else {
            return Err(Error::invalid(format!(
                "{}: {} frame labels for {l} steps",
                rec.video_id,
                labels.len()
            )));
        }
        all_labels.extend_from_slice(labels);
    }
    Ok((all_scores, all_labels))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Auc,
    Ap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub name: String,
    pub metric: Metric,
    /// The declared metric, when computable.
    pub value: Option<f64>,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub videos: usize,
    pub frames: usize,
    pub normalized: bool,
}

/// Detection and classification metrics of one manifest under one definition.
pub fn evaluate_dataset(
    scorer: &Scorer<'_>,
    name: &str,
    records: &[VideoRecord],
    seqs: &[&FeatureSequence],
    definition: &AnomalyDefinition,
    metric: Metric,
    normalize: bool,
) -> Result<(DatasetReport, Vec<VideoScore>)> {
    if records.len() != seqs.len() {
        return Err(Error::invalid("records and sequences differ in count"));
    }
    let scores = scorer.score_all(seqs, definition)?;
    let (mut frame_scores, frame_labels) = frame_level_inputs(records, seqs, &scores)?;
    if normalize {
        min_max_normalize(&mut frame_scores);
    }
    let (auc, ap) = if frame_labels.is_empty() {
        log::warn!("{name}: no frame labels, detection metrics skipped");
        (None, None)
    } else {
        let auc = roc_auc(&frame_scores, &frame_labels)
            .map_err(|e| log::warn!("{name}: AUC unavailable: {e}"))
            .ok();
        let ap = average_precision(&frame_scores, &frame_labels)
            .map_err(|e| log::warn!("{name}: AP unavailable: {e}"))
            .ok();
        (auc, ap)
    };
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for (rec, sc) in records.iter().zip(&scores) {
        let known = !rec.is_abnormal() || definition.index_of(&rec.label).is_some();
        if known {
            truth.push(definition.target_index(&rec.label));
            predicted.push(crate::types::argmax(&sc.class_probs));
        }
    }
    let cls = if truth.is_empty() {
        None
    } else {
        Some(multiclass_metrics(&predicted, &truth)?)
    };
    let value = match metric {
        Metric::Auc => auc,
        Metric::Ap => ap,
    };
    let report = DatasetReport {
        name: name.to_string(),
        metric,
        value,
        auc,
        ap,
        accuracy: cls.map(|m| m.accuracy),
        macro_f1: cls.map(|m| m.macro_f1),
        videos: records.len(),
        frames: frame_labels.len(),
        normalized: normalize,
    };
    Ok((report, scores))
}

/// One test manifest of a cross-dataset run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSet {
    pub name: String,
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub definition: PathBuf,
    #[serde(default)]
    pub metric: Metric,
    /// Min-max normalise scores before the metric (anomaly-only sets).
    #[serde(default)]
    pub normalize: bool,
    /// Restrict to one split; all records when absent.
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol1Report {
    pub datasets: Vec<DatasetReport>,
}

/// Records of `split` (or all) with their sequences loaded from `repo`.
pub fn load_split(
    records: &[VideoRecord],
    repo: &FeatureRepository,
    split: Option<Split>,
) -> Result<(Vec<VideoRecord>, Vec<FeatureSequence>)> {
    let chosen: Vec<VideoRecord> = records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .cloned()
        .collect();
    let seqs = chosen
        .iter()
        .map(|r| repo.read_features(&r.video_id))
        .collect::<Result<Vec<_>>>()?;
    Ok((chosen, seqs))
}

/// Score each manifest with its own definition and report its metrics.
pub fn evaluate_protocol1(scorer: &Scorer<'_>, sets: &[EvalSet]) -> Result<(Protocol1Report, Vec<VideoScore>)> {
    let mut datasets = Vec::with_capacity(sets.len());
    let mut dump = Vec::new();
    for set in sets {
        let records = load_manifest(&set.manifest)?;
        let repo = FeatureRepository::open(&set.features)?;
        let definition = AnomalyDefinition::load(&set.definition)?;
        let (records, seqs) = load_split(&records, &repo, set.split)?;
        let refs: Vec<&FeatureSequence> = seqs.iter().collect();
        let (report, scores) = evaluate_dataset(
            scorer,
            &set.name,
            &records,
            &refs,
            &definition,
            set.metric,
            set.normalize,
        )?;
        log::info!("{}: {:?} = {:?}", set.name, set.metric, report.value);
        datasets.push(report);
        dump.extend(scores);
    }
    Ok((Protocol1Report { datasets }, dump))
}

/// Classes treated as abnormal under one changed definition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetDefinition {
    pub name: String,
    pub classes: Vec<String>,
}

/// Read subsets from either a JSON array or `{"subsets": [...]}`.
pub fn load_subsets(path: &Path) -> Result<Vec<SubsetDefinition>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum File {
        List(Vec<SubsetDefinition>),
        Wrapped { subsets: Vec<SubsetDefinition> },
    }
    let text = std::fs::read_to_string(path)?;
    let subsets = match serde_json::from_str::<File>(&text)? {
        File::List(s) | File::Wrapped { subsets: s } => s,
    };
    if subsets.is_empty() {
        return Err(Error::invalid(format!("{}: no subsets", path.display())));
    }
    Ok(subsets)
}

fn abnormal_inventory(records: &[VideoRecord]) -> BTreeSet<&str> {
    records
        .iter()
        .filter(|r| r.is_abnormal())
        .map(|r| r.label.as_str())
        .collect()
}

fn check_subset(subset: &SubsetDefinition, inventory: &BTreeSet<&str>) -> Result<()> {
    if subset.classes.is_empty() {
        return Err(Error::invalid(format!("subset `{}` is empty", subset.name)));
    }
    for c in &subset.classes {
        if !inventory.contains(c.as_str()) {
            return Err(Error::invalid(format!(
                "subset `{}` names unknown class `{c}`",
                subset.name
            )));
        }
    }
    Ok(())
}

/// Videos of classes outside the subset become normal with zeroed frame
/// labels; everything else is unchanged.
pub fn relabel_for_subset(records: &[VideoRecord], subset: &SubsetDefinition) -> Result<Vec<VideoRecord>> {
    check_subset(subset, &abnormal_inventory(records))?;
    Ok(records
        .iter()
        .map(|r| {
            if r.is_abnormal() && !subset.classes.contains(&r.label) {
                let mut out = r.clone();
                out.label = NORMAL_LABEL.to_string();
                out.description = None;
                if let Some(fl) = &mut out.frame_labels {
                    fl.iter_mut().for_each(|v| *v = 0);
                }
                out
            } else {
                r.clone()
            }
        })
        .collect())
}

/// The entries of `base` named by the subset, plus the normal class.
pub fn subset_definition(base: &AnomalyDefinition, subset: &SubsetDefinition) -> Result<AnomalyDefinition> {
    let mut entries = Vec::with_capacity(subset.classes.len() + 1);
    for c in &subset.classes {
        let i = base.index_of(c).ok_or_else(|| {
            Error::invalid(format!("subset `{}`: class `{c}` missing from the definition", subset.name))
        })?;
        entries.push(base.classes()[i].clone());
    }
    entries.push(base.classes()[base.normal_index()].clone());
    let n = entries.len() - 1;
    Ok(AnomalyDefinition::new(entries, n)?.named(subset.name.clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub name: String,
    pub classes: Vec<String>,
    pub auc: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol2Report {
    pub k: usize,
    pub subsets: Vec<SubsetReport>,
    pub mean_auc: f64,
    pub mean_ap: f64,
}

/// Score under each subset definition against the relabelled ground truth
/// and average (drift@k).
pub fn evaluate_protocol2(
    scorer: &Scorer<'_>,
    records: &[VideoRecord],
    seqs: &[&FeatureSequence],
    base: &AnomalyDefinition,
    subsets: &[SubsetDefinition],
) -> Result<Protocol2Report> {
    if subsets.is_empty() {
        return Err(Error::invalid("protocol 2 needs at least one subset"));
    }
    let mut reports = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let relabeled = relabel_for_subset(records, subset)?;
        let definition = subset_definition(base, subset)?;
        let scores = scorer.score_all(seqs, &definition)?;
        let (s, l) = frame_level_inputs(&relabeled, seqs, &scores)?;
        let auc = roc_auc(&s, &l)?;
        let ap = average_precision(&s, &l)?;
        log::info!("subset {}: AUC {auc:.4}, AP {ap:.4}", subset.name);
        reports.push(SubsetReport {
            name: subset.name.clone(),
            classes: subset.classes.clone(),
            auc,
            ap,
        });
    }
    Ok(Protocol2Report {
        k: reports.len(),
        mean_auc: sorted_mean(reports.iter().map(|r| r.auc)),
        mean_ap: sorted_mean(reports.iter().map(|r| r.ap)),
        subsets: reports,
    })
}

/// Mean accumulated in sorted order, so it does not depend on input order.
fn sorted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// JSONL score dump, one line per video.
pub fn write_score_dump(path: &Path, scores: &[VideoScore]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in scores {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
