//! Train on the default synthetic dataset and print per-epoch validation
//! metrics and the validation confusion matrix of the selected checkpoint.
//!
//! Usage: `reference_run [EPOCHS] [LEARNING_RATE] [LOG.jsonl]`

use std::time::Instant;

use openvad::config::Config;
use openvad::data::{build_knn_index, generate_synthetic_dataset, SyntheticSpec};
use openvad::eval::Scorer;
use openvad::model::TextEncoder;
use openvad::train::{fit, TrainingSet, Validation};
use openvad::types::{argmax, Split, VideoRecord};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let defaults = Config::default();
    let cfg = Config {
        hidden_size: 64,
        epochs: args.first().map(|s| s.parse()).transpose()?.unwrap_or(30),
        learning_rate: args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(defaults.learning_rate),
        ..defaults
    };
    let data = generate_synthetic_dataset(&SyntheticSpec::default())?;
    let dir = tempfile::tempdir()?;
    let (_, repo) = data.save(dir.path())?;
    let knn = build_knn_index(&repo, &data.records, cfg.knn_n)?;
    let set = TrainingSet::new(&data.records, &repo, knn, data.prototypes.class_name_definition())?;
    let text = TextEncoder::toy(data.prototypes.clone(), cfg.seed);
    let val: Vec<VideoRecord> = data.records.iter().filter(|r| r.split == Split::Val).cloned().collect();
    let seqs: Vec<_> = val.iter().map(|r| data.sequence(&r.video_id).unwrap().clone()).collect();
    let mut log: Box<dyn std::io::Write> = match args.get(2) {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::sink()),
    };
    let start = Instant::now();
    let validation = Validation {
        records: &val,
        sequences: &seqs,
    };
    let out = fit(&set, Some(validation), &text, &cfg, &mut log)?;
    for e in &out.history {
        println!(
            "epoch {:>2}  loss {:>9.4}  auc {:.4}  acc {:.2}",
            e.epoch,
            e.mean_loss,
            e.val_auc.unwrap_or(f64::NAN),
            e.val_accuracy.unwrap_or(f64::NAN)
        );
    }
    println!("elapsed {:.1} s, selected epoch {}", start.elapsed().as_secs_f64(), out.best.meta["epoch"]);

    let def = &set.taxonomy;
    let scorer = Scorer {
        model: &out.best.model,
        text: &text,
        language_guided: cfg.language_guided,
    };
    let refs: Vec<_> = seqs.iter().collect();
    let c = def.num_classes();
    let mut confusion = vec![vec![0; c]; c];
    for (r, s) in val.iter().zip(scorer.score_all(&refs, def)?) {
        confusion[def.target_index(&r.label)][argmax(&s.class_probs)] += 1;
    }
    println!("confusion (rows: truth, columns: predicted; last class is normal)");
    for row in confusion {
        println!("  {row:?}");
    }
    Ok(())
}
