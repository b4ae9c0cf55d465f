//! Line-delimited JSON dataset index.
//!
//! Each non-empty line is one record:
//! `{"image": "img/0001.png", "annotation": "ann/0001.json", "split": "train", "label": "snow"}`.
//! Relative paths resolve against the manifest's directory; `label` is optional.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleManifest {
    /// Records with paths already resolved.
    pub records: Vec<ManifestRecord>,
}

impl SampleManifest {
    pub fn split(&self, tag: &str) -> Vec<ManifestRecord> {
        self.records.iter().filter(|r| r.split == tag).cloned().collect()
    }

    pub fn split_tags(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.split.clone()).collect()
    }
}

/// Parse and check a manifest. All problems (unparsable lines, missing
/// files) are collected into one [`Error::Data`] report.
pub fn load_manifest(path: &Path) -> Result<SampleManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    let mut problems = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ManifestRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("{}:{}: malformed record: {e}", path.display(), lineno + 1));
                continue;
            }
        };
        rec.image = base.join(&rec.image);
        rec.annotation = base.join(&rec.annotation);
        for p in [&rec.image, &rec.annotation] {
            if !p.is_file() {
                problems.push(format!("{}:{}: missing file {}", path.display(), lineno + 1, p.display()));
            }
        }
        records.push(rec);
    }
    if problems.is_empty() {
        Ok(SampleManifest { records })
    } else {
        Err(Error::Data(problems))
    }
}

/// Write records with paths relative to the manifest's directory when possible.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::new();
    for r in records {
        let mut r = r.clone();
        for p in [&mut r.image, &mut r.annotation] {
            if let Ok(rel) = p.strip_prefix(base) {
                *p = rel.to_path_buf();
            }
        }
        out.push_str(&serde_json::to_string(&r).expect("record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Seeded random train/test partition of the records whose label matches
/// `label` (all records when `None`). The train side receives
/// `round(train_fraction · n)` records.
pub fn build_splits(
    manifest: &SampleManifest,
    label: Option<&str>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<ManifestRecord>, Vec<ManifestRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut pool: Vec<ManifestRecord> = manifest
        .records
        .iter()
        .filter(|r| label.is_none_or(|l| r.label.as_deref() == Some(l)))
        .cloned()
        .collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * pool.len() as f64).round() as usize;
    let test = pool.split_off(n_train);
    Ok((pool, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize, label: Option<&str>) -> ManifestRecord {
        ManifestRecord {
            image: format!("img/{i}.png").into(),
            annotation: format!("ann/{i}.json").into(),
            split: "all".into(),
            label: label.map(str::to_string),
        }
    }

    fn manifest(n: usize) -> SampleManifest {
        SampleManifest {
            records: (0..n)
                .map(|i| record(i, Some(if i % 3 == 0 { "snow" } else { "fog" })))
                .collect(),
        }
    }

    #[test]
    fn eighty_twenty_split() {
        let (train, test) = build_splits(&manifest(10), None, 0.8, 2023).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let mut all: Vec<_> = train.iter().chain(&test).map(|r| r.image.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn label_filter_and_determinism() {
        let m = manifest(12);
        let (train, test) = build_splits(&m, Some("snow"), 0.5, 1).unwrap();
        assert!(train.iter().chain(&test).all(|r| r.label.as_deref() == Some("snow")));
        assert_eq!(train.len() + test.len(), 4);
        assert_eq!(build_splits(&m, None, 0.7, 9).unwrap(), build_splits(&m, None, 0.7, 9).unwrap());
        assert!(build_splits(&m, None, 1.0, 9).is_err());
    }

    #[test]
    fn load_reports_every_problem() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"x").unwrap();
        std::fs::write(dir.path().join("a.json"), b"{}").unwrap();
        let text = [
            r#"{"image":"a.png","annotation":"a.json","split":"train"}"#,
            r#"{"image":"b.png","annotation":"a.json","split":"train"}"#,
            "not json",
            r#"{"image":"a.png","annotation":"a.json","split":"test","label":"snow","extra":1}"#,
        ]
        .join("\n");
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, text).unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::Data(items) => assert_eq!(items.len(), 3, "{items:?}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"x").unwrap();
        std::fs::write(dir.path().join("a.json"), b"{}").unwrap();
        let rec = ManifestRecord {
            image: dir.path().join("a.png"),
            annotation: dir.path().join("a.json"),
            split: "train".into(),
            label: Some("haze".into()),
        };
        let path = dir.path().join("m.jsonl");
        write_manifest(&path, std::slice::from_ref(&rec)).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().contains("\"a.png\""));
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.records, vec![rec]);
        assert_eq!(m.split("train").len(), 1);
    }
}
