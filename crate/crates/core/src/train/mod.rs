//! Weakly supervised training: batch assembly with on-the-fly synthesis,
//! AdamW updates, per-epoch validation and checkpoint selection.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::Config;
use crate::data::{FeatureRepository, KnnIndex};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, Metric, Scorer};
use crate::losses::{total_loss, BatchViews, LossBreakdown, SampleView};
use crate::model::{Checkpoint, Model, TextEncoder, TextEncoderMode};
use crate::rng::{make_substream, streams, Rng};
use crate::synthesis::{synthesize, VideoPool};
use crate::tensor::Mat;
use crate::types::{AnomalyDefinition, ClassEntry, FeatureSequence, Split, VideoRecord};

/// How the batch definition is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefinitionMode {
    /// The fixed class taxonomy plus normal.
    ClassNames,
    /// One entry per abnormal sample's description plus normal.
    Descriptions,
}

impl fmt::Display for DefinitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefinitionMode::ClassNames => "class_names",
            DefinitionMode::Descriptions => "descriptions",
        })
    }
}

/// Training split with features in memory.
pub struct TrainingSet {
    records: BTreeMap<String, VideoRecord>,
    normal: Vec<FeatureSequence>,
    abnormal: Vec<FeatureSequence>,
    pub taxonomy: AnomalyDefinition,
    pub knn: KnnIndex,
}

/// Class-name definition over the distinct abnormal training labels, with
/// each label as its own prompt.
pub fn taxonomy_from_records(records: &[VideoRecord]) -> Result<AnomalyDefinition> {
    let mut labels: Vec<&str> = records
        .iter()
        .filter(|r| r.split == Split::Train && r.is_abnormal())
        .map(|r| r.label.as_str())
        .collect();
    labels.sort_unstable();
    labels.dedup();
    let entries = labels.iter().map(|l| ClassEntry::new(*l, *l)).collect();
    Ok(AnomalyDefinition::with_normal(entries)?.named("taxonomy"))
}

impl TrainingSet {
    pub fn new(
        records: &[VideoRecord],
        repo: &FeatureRepository,
        knn: KnnIndex,
        taxonomy: AnomalyDefinition,
    ) -> Result<TrainingSet> {
        let mut normal = Vec::new();
        let mut abnormal = Vec::new();
        let mut by_id = BTreeMap::new();
        for r in records.iter().filter(|r| r.split == Split::Train) {
            let seq = repo.read_features(&r.video_id)?;
            r.validate(Some(seq.len()))?;
            if r.is_abnormal() {
                if taxonomy.index_of(&r.label).is_none() {
                    return Err(Error::invalid(format!(
                        "{}: label `{}` is not in the class taxonomy",
                        r.video_id, r.label
                    )));
                }
                abnormal.push(seq);
            } else {
                normal.push(seq);
            }
            by_id.insert(r.video_id.clone(), r.clone());
        }
        if normal.is_empty() || abnormal.is_empty() {
            return Err(Error::invalid(format!(
                "training split needs normal and abnormal videos (found {} normal, {} abnormal)",
                normal.len(),
                abnormal.len()
            )));
        }
        Ok(TrainingSet {
            records: by_id,
            normal,
            abnormal,
            taxonomy,
            knn,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.normal[0].dim()
    }

    pub fn pool(&self) -> Result<VideoPool<'_>> {
        VideoPool::new(self.normal.iter().collect(), self.abnormal.iter().collect())
    }

    pub fn record(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.get(video_id)
    }

    /// Optimizer steps per epoch.
    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }
}

/// One sample padded to the batch length.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSample {
    pub anchor_id: String,
    /// `L_max×E`, zero rows past `valid`.
    pub features: Mat,
    pub valid: usize,
    pub pseudo_label: Vec<u8>,
    pub abnormal: bool,
    pub class_index: usize,
    pub segment_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub mode: DefinitionMode,
    pub definition: AnomalyDefinition,
    pub samples: Vec<BatchSample>,
}

impl Batch {
    pub fn max_len(&self) -> usize {
        self.samples.iter().map(|s| s.valid).max().unwrap_or(0)
    }

    /// Summary used in diagnostics and determinism checks.
    pub fn composition(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.mode,
            "classes": self.definition.classes().iter().map(|c| &c.class_id).collect::<Vec<_>>(),
            "samples": self.samples.iter().map(|s| serde_json::json!({
                "anchor": s.anchor_id,
                "len": s.valid,
                "abnormal": s.abnormal,
                "class_index": s.class_index,
                "segments": s.segment_count,
            })).collect::<Vec<_>>(),
        })
    }
}

/// The random stream of training step `step`.
pub fn batch_rng(seed: u64, step: u64) -> Rng {
    make_substream(seed, streams::TRAIN_BASE + step)
}

/// Draw one batch: the definition mode, then `batch_size` synthesized samples.
/// Description mode falls back to class names when the batch has no abnormal
/// sample or descriptions are disabled.
pub fn sample_batch(set: &TrainingSet, cfg: &Config, rng: &mut Rng, allow_descriptions: bool) -> Result<Batch> {
    let pool = set.pool()?;
    let describe = rng.random_bool(0.5);
    let mut drawn = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        drawn.push(synthesize(&pool, &set.knn, cfg, rng)?);
    }
    let abnormal_count = drawn.iter().filter(|s| s.abnormal).count();
    let mode = if describe && allow_descriptions && abnormal_count > 0 {
        DefinitionMode::Descriptions
    } else {
        DefinitionMode::ClassNames
    };
    let record = |id: &str| {
        set.record(id)
            .ok_or_else(|| Error::NotFound(format!("training record `{id}`")))
    };
    let (definition, targets) = match mode {
        DefinitionMode::ClassNames => {
            let def = set.taxonomy.clone();
            let targets = drawn
                .iter()
                .map(|s| Ok(def.target_index(&record(&s.anchor_id)?.label)))
                .collect::<Result<Vec<_>>>()?;
            (def, targets)
        }
        DefinitionMode::Descriptions => {
            let mut entries = Vec::with_capacity(abnormal_count);
            let mut targets = Vec::with_capacity(drawn.len());
            for s in &drawn {
                if s.abnormal {
                    let rec = record(&s.anchor_id)?;
                    let desc = rec.description.clone().ok_or_else(|| {
                        Error::invalid(format!("{}: abnormal video without description", rec.video_id))
                    })?;
                    targets.push(entries.len());
                    entries.push(ClassEntry::new(format!("desc{}", entries.len()), desc));
                } else {
                    targets.push(usize::MAX);
                }
            }
            let def = AnomalyDefinition::with_normal(entries)?.named("descriptions");
            let normal = def.normal_index();
            targets.iter_mut().filter(|t| **t == usize::MAX).for_each(|t| *t = normal);
            (def, targets)
        }
    };
    let max_len = drawn.iter().map(|s| s.len()).max().unwrap_or(0);
    let samples = drawn
        .into_iter()
        .zip(targets)
        .map(|(s, class_index)| {
            let valid = s.len();
            let dim = s.features.dim();
            let mut features = Mat::zeros(max_len, dim);
            features.data_mut()[..valid * dim]
                .iter_mut()
                .zip(s.features.data())
                .for_each(|(d, &v)| *d = v as f64);
            let mut pseudo_label = s.pseudo_label;
            pseudo_label.resize(max_len, 0);
            BatchSample {
                anchor_id: s.anchor_id,
                features,
                valid,
                pseudo_label,
                abnormal: s.abnormal,
                class_index,
                segment_count: s.segment_count,
            }
        })
        .collect();
    Ok(Batch {
        mode,
        definition,
        samples,
    })
}

/// Parameters plus AdamW moments.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    first: Vec<Mat>,
    second: Vec<Mat>,
    /// Optimizer steps taken.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> TrainState {
        let zeros: Vec<Mat> = model
            .params
            .values()
            .iter()
            .map(|m| Mat::zeros(m.rows(), m.cols()))
            .collect();
        TrainState {
            model,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// Forward every sample on `tape` and assemble the batch loss.
fn batch_objective(
    tape: &mut Tape,
    model: &Model,
    p: &crate::model::BoundParams<'_>,
    text: &TextEncoder,
    batch: &Batch,
    cfg: &Config,
    unpadded: bool,
) -> Result<(crate::autograd::Var, LossBreakdown)> {
    let raw = text.embed(&batch.definition)?;
    let raw = tape.constant(raw);
    let z_t = model.project_input(tape, p, raw);
    let mut samples = Vec::with_capacity(batch.samples.len());
    for s in &batch.samples {
        let x = if unpadded {
            s.features.slice_rows(0, s.valid)
        } else {
            s.features.clone()
        };
        let x = tape.constant(x);
        let out = model.forward_with_text(tape, p, x, s.valid, z_t, cfg.language_guided);
        samples.push(SampleView {
            y_bin: out.y_bin,
            y_mul: out.y_mul,
            v_t: out.v_t,
            valid: s.valid,
            pseudo_label: s.pseudo_label.clone(),
            abnormal: s.abnormal,
            class_index: s.class_index,
            segment_count: s.segment_count,
        });
    }
    total_loss(tape, &BatchViews { samples, z_t }, cfg)
}

/// Loss of `batch` without updating anything. With `unpadded` each sample
/// is cut to its valid length before the forward pass.
pub fn evaluate_batch_loss(model: &Model, text: &TextEncoder, batch: &Batch, cfg: &Config, unpadded: bool) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    Ok(batch_objective(&mut tape, model, &p, text, batch, cfg, unpadded)?.1)
}

/// Batch loss and its gradient with respect to every parameter, in
/// parameter-store order.
pub fn batch_gradients(model: &Model, text: &TextEncoder, batch: &Batch, cfg: &Config) -> Result<(LossBreakdown, Vec<Mat>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, true);
    let (loss, breakdown) = batch_objective(&mut tape, model, &p, text, batch, cfg, true)?;
    if !breakdown.total.is_finite() {
        return Ok((breakdown, Vec::new()));
    }
    let grads = tape.backward(loss);
    let g = p
        .vars()
        .iter()
        .zip(model.params.values())
        .map(|(&v, m)| grads.get_or_zeros(v, m.shape()))
        .collect();
    Ok((breakdown, g))
}

/// One AdamW update on the total loss of `batch` at learning rate `lr`.
pub fn train_step(state: &mut TrainState, batch: &Batch, text: &TextEncoder, cfg: &Config, lr: f64) -> Result<LossBreakdown> {
    let (breakdown, mut g) = batch_gradients(&state.model, text, batch, cfg)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {} ({breakdown:?}); batch {}",
            state.step,
            batch.composition()
        )));
    }
    if cfg.grad_clip > 0.0 {
        let norm = g.iter().map(|m| m.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let k = cfg.grad_clip / norm;
            g.iter_mut().for_each(|m| m.data_mut().iter_mut().for_each(|x| *x *= k));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, grad) in g.iter().enumerate() {
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        let w = state.model.params.values_mut()[k].data_mut();
        for i in 0..w.len() {
            let gi = grad.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            w[i] -= lr * (update + cfg.weight_decay * w[i]);
        }
    }
    Ok(breakdown)
}

/// One JSONL line per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_mil: f64,
    pub loss_align: f64,
    pub loss_dvs: f64,
    pub loss_neg: f64,
    pub mode: DefinitionMode,
}

/// One JSONL line per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
    pub learning_rate: f64,
    pub val_auc: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Held-out videos scored after every epoch.
pub struct Validation<'a> {
    pub records: &'a [VideoRecord],
    pub sequences: &'a [FeatureSequence],
}

pub struct FitOutcome {
    /// Best epoch by validation AUC (the last epoch without validation).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochSummary>,
}

/// Text encoder for training data: prototype-backed when a prototype table
/// is available.
pub fn default_text_encoder(prototypes: Option<crate::data::Prototypes>, dim: usize, seed: u64) -> TextEncoder {
    match prototypes {
        Some(p) => TextEncoder::toy(p, seed),
        None => TextEncoder::external(dim),
    }
}

/// Train for `cfg.epochs` epochs of `⌈N/batch_size⌉` steps, writing step and
/// epoch lines to `log`.
pub fn fit(
    set: &TrainingSet,
    validation: Option<Validation<'_>>,
    text: &TextEncoder,
    cfg: &Config,
    log: &mut dyn Write,
) -> Result<FitOutcome> {
    let cfg = cfg.clone().validate()?;
    let model = Model::init(&cfg, set.embed_dim(), &mut make_substream(cfg.seed, streams::INIT));
    let allow_descriptions = text.mode == TextEncoderMode::ToyPrototype;
    let steps_per_epoch = set.steps_per_epoch(cfg.batch_size) as u64;
    let mut state = TrainState::new(model);
    let snapshot = |state: &TrainState, epoch: usize, val_auc: Option<f64>| Checkpoint {
        config: cfg.clone(),
        model: state.model.clone(),
        text: text.clone(),
        meta: serde_json::json!({
            "epoch": epoch,
            "step": state.step,
            "val_auc": val_auc,
            "selection": "val_auc",
        }),
    };
    let mut best = snapshot(&state, 0, None);
    let mut best_auc: Option<f64> = None;
    let mut best_epoch: Option<usize> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate * cfg.lr_decay.powi(epoch as i32 - 1);
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let step = state.step;
            let batch = sample_batch(set, &cfg, &mut batch_rng(cfg.seed, step), allow_descriptions)?;
            let b = train_step(&mut state, &batch, text, &cfg, lr)?;
            loss_sum += b.total;
            let line = StepLog {
                step,
                epoch,
                loss_total: b.total,
                loss_mil: b.mil,
                loss_align: b.align,
                loss_dvs: b.dvs,
                loss_neg: b.neg,
                mode: batch.mode,
            };
            serde_json::to_writer(&mut *log, &line)?;
            log.write_all(b"\n")?;
        }
        let (val_auc, val_accuracy) = match &validation {
            Some(v) => {
                let scorer = Scorer {
                    model: &state.model,
                    text,
                    language_guided: cfg.language_guided,
                };
                let refs: Vec<&FeatureSequence> = v.sequences.iter().collect();
                let (report, _) = evaluate_dataset(&scorer, "val", v.records, &refs, &set.taxonomy, Metric::Auc, false)?;
                (report.auc, report.accuracy)
            }
            None => (None, None),
        };
        let improved = match (val_auc, best_auc) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            (None, _) => validation.is_none() || best_epoch.is_none(),
        };
        if improved {
            best_auc = val_auc;
            best_epoch = Some(epoch);
            best = snapshot(&state, epoch, val_auc);
        }
        let summary = EpochSummary {
            epoch,
            steps: state.step,
            mean_loss: loss_sum / steps_per_epoch.max(1) as f64,
            learning_rate: lr,
            val_auc,
            val_accuracy,
            best_epoch,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val AUC {:?}, val acc {:?}",
            summary.mean_loss,
            val_auc,
            val_accuracy
        );
        serde_json::to_writer(&mut *log, &summary)?;
        log.write_all(b"\n")?;
        history.push(summary);
    }
    log.flush()?;
    let last_auc = history.last().and_then(|h| h.val_auc);
    let last = snapshot(&state, cfg.epochs, last_auc);
    Ok(FitOutcome { best, last, history })
}
