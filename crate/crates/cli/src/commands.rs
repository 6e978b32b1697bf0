use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use openvad::config::Config;
use openvad::data::{
    build_knn_index, generate_synthetic_dataset, load_manifest, validate_against_repository, FeatureRepository,
    KnnIndex, Prototypes, SyntheticSpec,
};
use openvad::error::Error;
use openvad::eval::{
    evaluate_protocol1, evaluate_protocol2, load_split, load_subsets, write_score_dump, EvalSet, Protocol1Report,
    Protocol2Report, Scorer,
};
use openvad::model::{Checkpoint, TextEncoder};
use openvad::train::{fit, taxonomy_from_records, TrainingSet, Validation};
use openvad::types::{AnomalyDefinition, FeatureSequence, Split, VideoRecord};
use serde::Serialize;

use crate::args::{ConfigArgs, EvalArgs, KnnArgs, ScoreArgs, ServeArgs, SynthArgs, TrainArgs};

pub enum Failure {
    /// Bad flags, missing inputs or invalid files: exit 2.
    Usage(String),
    /// Anything that fails after the inputs were accepted: exit 1.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Config { field, reason } => {
                Failure::Usage(format!("invalid value for --{}: {reason}", field.replace('_', "-")))
            }
            Error::Invalid(_)
            | Error::Manifest { .. }
            | Error::NotFound(_)
            | Error::Corrupt { .. }
            | Error::HashMismatch { .. }
            | Error::Json(_) => Failure::Usage(e.to_string()),
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Failure::Usage(e.to_string()),
            Error::NonFinite(_) | Error::Io(_) => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn echo<T: Serialize>(what: &str, value: &T) {
    match serde_json::to_string(value) {
        Ok(s) => eprintln!("resolved {what}: {s}"),
        Err(e) => log::warn!("could not echo {what}: {e}"),
    }
}

fn resolve_config(args: &ConfigArgs, base: Config) -> Result<Config, Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            require(p, "config file")?;
            Config::load(p)?
        }
        None => base,
    };
    args.apply(&mut cfg);
    let cfg = cfg.validate()?;
    echo("config", &cfg);
    Ok(cfg)
}

/// Load a checkpoint with flag overrides applied to its stored config. An
/// override that changes the architecture is a hash mismatch.
fn load_checkpoint(path: &Path, args: &ConfigArgs) -> Result<Checkpoint, Failure> {
    require(path, "checkpoint")?;
    let mut ckpt = Checkpoint::load(path, None, false)?;
    let cfg = resolve_config(args, ckpt.config.clone())?;
    let (want, found) = (cfg.architecture_hash(ckpt.model.arch.embed_dim), ckpt.config_hash());
    if want != found {
        return Err(Error::HashMismatch { expected: want, found }.into());
    }
    ckpt.config = cfg;
    Ok(ckpt)
}

fn writer(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

pub fn synth(a: SynthArgs) -> Outcome {
    let mut spec = SyntheticSpec::default();
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { spec.$f = v; } )* };
    }
    set!(num_categories, train_videos, val_videos, test_videos, embed_dim, min_len, max_len, abnormal_ratio, noise, stride_frames, fps, seed);
    if let Some(f) = &a.anomaly_fraction {
        spec.anomaly_fraction = (f[0], f[1]);
    }
    echo("spec", &spec);
    let data = generate_synthetic_dataset(&spec)?;
    let (manifest, repo) = data.save(&a.out)?;
    log::info!(
        "wrote {} videos to {} (manifest {})",
        repo.len(),
        a.out.display(),
        manifest.display()
    );
    Ok(())
}

fn open_inputs(manifest: &Path, features: &Path) -> Result<(Vec<VideoRecord>, FeatureRepository), Failure> {
    require(manifest, "manifest")?;
    require(features, "feature repository")?;
    let records = load_manifest(manifest)?;
    let repo = FeatureRepository::open(features)?;
    validate_against_repository(&records, &repo)?;
    Ok((records, repo))
}

pub fn knn(a: KnnArgs) -> Outcome {
    let cfg = resolve_config(&a.config, Config::default())?;
    let (records, repo) = open_inputs(&a.manifest, &a.features)?;
    let index = build_knn_index(&repo, &records, cfg.knn_n)?;
    index.save(&a.out)?;
    log::info!("neighbour index for {} videos written to {}", index.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Outcome {
    let cfg = resolve_config(&a.config, Config::default())?;
    let (records, repo) = open_inputs(&a.manifest, &a.features)?;
    let knn = match &a.knn {
        Some(p) => {
            require(p, "neighbour index")?;
            KnnIndex::load(p)?
        }
        None => build_knn_index(&repo, &records, cfg.knn_n)?,
    };
    let prototypes = match &a.prototypes {
        Some(p) => {
            require(p, "prototype table")?;
            Some(Prototypes::load(p)?)
        }
        None => None,
    };
    let taxonomy = match (&a.taxonomy, &prototypes) {
        (Some(p), _) => {
            require(p, "taxonomy")?;
            AnomalyDefinition::load(p)?
        }
        (None, Some(p)) => p.class_name_definition(),
        (None, None) => taxonomy_from_records(&records)?,
    };
    let text = match prototypes {
        Some(p) => TextEncoder::toy(p, cfg.seed),
        None => TextEncoder::external(repo.dim()),
    };
    let set = TrainingSet::new(&records, &repo, knn, taxonomy)?;
    let val: Vec<VideoRecord> = records
        .iter()
        .filter(|r| r.split == Split::Val && r.frame_labels.is_some())
        .cloned()
        .collect();
    let val_seqs = val
        .iter()
        .map(|r| repo.read_features(&r.video_id))
        .collect::<Result<Vec<FeatureSequence>, Error>>()?;
    let validation = (!val.is_empty()).then_some(Validation {
        records: &val,
        sequences: &val_seqs,
    });
    let mut log = writer(a.log.as_deref())?;
    let outcome = fit(&set, validation, &text, &cfg, &mut log).map_err(|e| match e {
        Error::NonFinite(m) => Failure::Runtime(format!("non-finite loss: {m}")),
        other => other.into(),
    })?;
    log.flush()?;
    outcome.best.save(&a.out)?;
    if let Some(p) = &a.last {
        outcome.last.save(p)?;
    }
    log::info!("checkpoint written to {} ({})", a.out.display(), outcome.best.meta);
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    protocol: u8,
    config_hash: String,
    language_guided: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    cross_dataset: Option<Protocol1Report>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drift: Option<Protocol2Report>,
}

pub fn eval(a: EvalArgs) -> Outcome {
    let ckpt = load_checkpoint(&a.checkpoint, &a.config)?;
    let scorer = Scorer {
        model: &ckpt.model,
        text: &ckpt.text,
        language_guided: ckpt.config.language_guided,
    };
    let mut report = EvalReport {
        protocol: a.protocol,
        config_hash: ckpt.config_hash(),
        language_guided: ckpt.config.language_guided,
        cross_dataset: None,
        drift: None,
    };
    let mut dump = Vec::new();
    if a.protocol == 1 {
        let path = a.sets.as_deref().expect("required by clap");
        require(path, "evaluation set file")?;
        let sets: Vec<EvalSet> = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(Error::from)?;
        for s in &sets {
            require(&s.manifest, "manifest")?;
            require(&s.features, "feature repository")?;
            require(&s.definition, "definition")?;
        }
        let (r, scores) = evaluate_protocol1(&scorer, &sets)?;
        report.cross_dataset = Some(r);
        dump = scores;
    } else {
        let (manifest, features) = (a.manifest.as_deref().unwrap(), a.features.as_deref().unwrap());
        let (definition, subsets) = (a.definition.as_deref().unwrap(), a.subsets.as_deref().unwrap());
        require(definition, "definition")?;
        require(subsets, "subset file")?;
        let (records, repo) = open_inputs(manifest, features)?;
        let base = AnomalyDefinition::load(definition)?;
        let subsets = load_subsets(subsets)?;
        let (records, seqs) = load_split(&records, &repo, Some(a.split.unwrap_or(Split::Test)))?;
        let refs: Vec<&FeatureSequence> = seqs.iter().collect();
        report.drift = Some(evaluate_protocol2(&scorer, &records, &refs, &base, &subsets)?);
        if a.scores.is_some() {
            dump = scorer.score_all(&refs, &base)?;
        }
    }
    if let Some(p) = &a.scores {
        write_score_dump(p, &dump)?;
    }
    let mut out = writer(a.out.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report).map_err(Error::from)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn score(a: ScoreArgs) -> Outcome {
    let ckpt = load_checkpoint(&a.checkpoint, &a.config)?;
    require(&a.features, "feature repository")?;
    require(&a.definition, "definition")?;
    let repo = FeatureRepository::open(&a.features)?;
    if !repo.contains(&a.video) {
        return Err(Failure::Usage(format!("unknown video `{}`", a.video)));
    }
    let definition = AnomalyDefinition::load(&a.definition)?;
    let seq = repo.read_features(&a.video)?;
    let r = ckpt.model.score(&seq, &definition, &ckpt.text, ckpt.config.language_guided)?;
    let (l, c) = r.y_mul.shape();
    let line = serde_json::json!({
        "video_id": a.video,
        "y_bin": r.y_bin,
        "frame_scores": r.frame_scores(),
        "y_mul": (0..l).map(|t| (0..c).map(|j| r.y_mul.get(t, j)).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "video_class_probs": r.video_class_probs,
        "definition_used": r.definition_used,
    });
    println!("{line}");
    Ok(())
}

pub fn serve(a: ServeArgs) -> Outcome {
    let ckpt = load_checkpoint(&a.checkpoint, &a.config)?;
    require(&a.features, "feature repository")?;
    if let Some(m) = &a.manifest {
        require(m, "manifest")?;
    }
    let origin = match &a.cors_origin {
        Some(o) => Some(
            axum::http::HeaderValue::from_str(o).map_err(|e| Failure::Usage(format!("invalid --cors-origin: {e}")))?,
        ),
        None => None,
    };
    let (features, manifest, split) = (a.features.clone(), a.manifest.clone(), a.split);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(openvad_service::serve(
        (a.bind, a.port).into(),
        origin,
        move || openvad_service::ServiceData::load(ckpt, &features, manifest.as_deref(), split),
        async {
            let _ = tokio::signal::ctrl_c().await;
        },
    ))?;
    Ok(())
}
