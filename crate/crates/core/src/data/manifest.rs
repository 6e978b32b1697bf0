use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::FeatureRepository;
use crate::error::{Error, Result};
use crate::types::VideoRecord;

/// Read a JSONL manifest, validating every row.
pub fn load_manifest(path: &Path) -> Result<Vec<VideoRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: VideoRecord = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        rec.validate(None).map_err(|e| err(e.to_string()))?;
        records.push(rec);
    }
    let counts = split_counts(&records);
    log::info!(
        "{}: {} records ({})",
        path.display(),
        records.len(),
        counts
            .iter()
            .map(|(s, n)| format!("{s}={n}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[VideoRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn split_counts(records: &[VideoRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.split.to_string()).or_insert(0) += 1;
    }
    counts
}

/// Every record resolves to a feature file whose length matches its frame labels.
pub fn validate_against_repository(records: &[VideoRecord], repo: &FeatureRepository) -> Result<()> {
    for r in records {
        let len = repo.len_of(&r.video_id)?;
        r.validate(Some(len))?;
    }
    Ok(())
}
