//! Dataset ingestion and deterministic train/test splitting.
//!
//! Input CSV schema is `id,label,tweet` by default (column names are
//! configurable); labels must be 0 (not offensive) or 1 (offensive). The
//! dataset itself is not bundled — see `data/DATASET.md` for where to get
//! the full 31,962-tweet file; a small synthetic fixture with the same
//! schema ships in `data/` for smoke runs.

use crate::rng::Rng;
use std::path::Path;
use thiserror::Error;

/// One labeled example as loaded from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTweet {
    pub id: String,
    pub text: String,
    /// 0 = not offensive, 1 = offensive.
    pub label: u8,
}

/// Split assignment of one record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Records plus a train/test partition over them.
#[derive(Clone, Debug)]
pub struct LabeledCorpus {
    pub records: Vec<RawTweet>,
    pub splits: Vec<Split>,
    /// True when a stratified split was requested but impossible because a
    /// class was absent, and the split fell back to unstratified.
    pub stratify_degenerated: bool,
}

impl LabeledCorpus {
    pub fn train(&self) -> impl Iterator<Item = &RawTweet> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|&(_, s)| *s == Split::Train)
            .map(|(r, _)| r)
    }

    pub fn test(&self) -> impl Iterator<Item = &RawTweet> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|&(_, s)| *s == Split::Test)
            .map(|(r, _)| r)
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing column {0:?} in CSV header")]
    MissingColumn(String),
    #[error("row {row}: label {value:?} is not binary (expected 0 or 1)")]
    BadLabel { row: u64, value: String },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("corpus is empty")]
    Empty,
}

/// Load labeled tweets from a CSV file with a header row. Order-preserving;
/// quoted fields may contain commas and newlines.
pub fn load_csv(path: &Path, text_column: &str, label_column: &str) -> Result<Vec<RawTweet>, DataError> {
    let file = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    load_csv_from_reader(file, text_column, label_column)
}

/// Same as [`load_csv`] over any reader (used by the embedded demo corpus).
pub fn load_csv_from_reader(
    reader: impl std::io::Read,
    text_column: &str,
    label_column: &str,
) -> Result<Vec<RawTweet>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_owned()))
    };
    let text_idx = col(text_column)?;
    let label_idx = col(label_column)?;
    let id_idx = headers.iter().position(|h| h == "id");

    let mut records = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let record = result?;
        let row = record.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
        let label_raw = record.get(label_idx).unwrap_or_default().trim();
        let label = match label_raw {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DataError::BadLabel { row, value: other.to_owned() });
            }
        };
        let id = id_idx
            .and_then(|idx| record.get(idx))
            .map(str::to_owned)
            .unwrap_or_else(|| (i + 1).to_string());
        records.push(RawTweet {
            id,
            text: record.get(text_idx).unwrap_or_default().to_owned(),
            label,
        });
    }
    Ok(records)
}

/// Partition records into train/test. Test size is round(fraction·N).
/// Stratified splitting rounds per class and then reconciles to the global
/// total by adjusting the largest class; it degenerates to unstratified
/// (with a flag) when a class is absent. Deterministic for a given seed.
pub fn split(
    records: Vec<RawTweet>,
    test_fraction: f64,
    stratified: bool,
    seed: u64,
) -> Result<LabeledCorpus, DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::BadFraction(test_fraction));
    }
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    let n = records.len();
    let test_total = ((test_fraction * n as f64).round() as usize).min(n);
    let mut rng = Rng::new(seed);
    let mut splits = vec![Split::Train; n];

    let class_counts = [
        records.iter().filter(|r| r.label == 0).count(),
        records.iter().filter(|r| r.label == 1).count(),
    ];
    let degenerate = stratified && class_counts.iter().any(|&c| c == 0);

    if stratified && !degenerate {
        let mut targets = [
            (test_fraction * class_counts[0] as f64).round() as usize,
            (test_fraction * class_counts[1] as f64).round() as usize,
        ];
        // Reconcile the per-class rounding to the global test size by
        // adjusting the larger class (ties: class 0).
        let larger = usize::from(class_counts[1] > class_counts[0]);
        while targets[0] + targets[1] > test_total {
            let c = if targets[larger] > 0 { larger } else { 1 - larger };
            targets[c] -= 1;
        }
        while targets[0] + targets[1] < test_total {
            let c = if targets[larger] < class_counts[larger] { larger } else { 1 - larger };
            targets[c] += 1;
        }
        for class in 0..2 {
            let mut idx: Vec<usize> =
                (0..n).filter(|&i| records[i].label == class as u8).collect();
            rng.shuffle(&mut idx);
            for &i in idx.iter().take(targets[class]) {
                splits[i] = Split::Test;
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        for &i in idx.iter().take(test_total) {
            splits[i] = Split::Test;
        }
    }

    Ok(LabeledCorpus { records, splits, stratify_degenerated: degenerate })
}

/// Per-class counts and fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassReport {
    pub counts: [usize; 2],
    pub fractions: [f64; 2],
    pub majority_fraction: f64,
}

pub fn class_report(records: &[RawTweet]) -> Result<ClassReport, DataError> {
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    let n = records.len() as f64;
    let counts = [
        records.iter().filter(|r| r.label == 0).count(),
        records.iter().filter(|r| r.label == 1).count(),
    ];
    let fractions = [counts[0] as f64 / n, counts[1] as f64 / n];
    Ok(ClassReport { counts, fractions, majority_fraction: fractions[0].max(fractions[1]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_three_rows() {
        let f = write_tmp("id,label,tweet\n1,0,hello there\n2,1,you fool\n3,0,\"quoted, comma\"\n");
        let records = load_csv(f.path(), "tweet", "label").unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[2].text, "quoted, comma");
        assert_eq!(records[1].label, 1);
    }

    #[test]
    fn load_preserves_order() {
        let f = write_tmp("id,label,tweet\n9,0,a\n4,0,b\n7,1,c\n");
        let records = load_csv(f.path(), "tweet", "label").unwrap();
        let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["9", "4", "7"]);
    }

    #[test]
    fn load_rejects_non_binary_label() {
        let f = write_tmp("id,label,tweet\n1,0,fine\n2,2,bad\n");
        match load_csv(f.path(), "tweet", "label") {
            Err(DataError::BadLabel { row, value }) => {
                assert_eq!(row, 3); // header is line 1
                assert_eq!(value, "2");
            }
            other => panic!("expected BadLabel, got {:?}", other.map(|r| r.len())),
        }
    }

    #[test]
    fn load_names_missing_column() {
        let f = write_tmp("id,sentiment,tweet\n1,0,x\n");
        match load_csv(f.path(), "tweet", "label") {
            Err(DataError::MissingColumn(c)) => assert_eq!(c, "label"),
            other => panic!("expected MissingColumn, got {:?}", other.map(|r| r.len())),
        }
    }

    #[test]
    fn load_missing_file_names_path() {
        let err = load_csv(Path::new("/no/such/file.csv"), "tweet", "label").unwrap_err();
        assert!(err.to_string().contains("/no/such/file.csv"));
    }

    fn synthetic(n0: usize, n1: usize) -> Vec<RawTweet> {
        let mut v = Vec::with_capacity(n0 + n1);
        for i in 0..n0 {
            v.push(RawTweet { id: format!("n{}", i), text: "benign".into(), label: 0 });
        }
        for i in 0..n1 {
            v.push(RawTweet { id: format!("p{}", i), text: "nasty".into(), label: 1 });
        }
        v
    }

    #[test]
    fn split_ten_records_fraction_fifth() {
        let corpus = split(synthetic(8, 2), 0.2, true, 1).unwrap();
        assert_eq!(corpus.test().count(), 2);
        assert_eq!(corpus.train().count(), 8);
    }

    #[test]
    fn split_full_scale_arithmetic() {
        // 31,962 records at 20% → 6,392 test (round(6392.4)), 25,570 train.
        let corpus = split(synthetic(29_720, 2_242), 0.2, true, 7).unwrap();
        assert_eq!(corpus.test().count(), 6_392);
        assert_eq!(corpus.train().count(), 25_570);
        // Per-class proportions preserved within one record.
        let test_pos = corpus.test().filter(|r| r.label == 1).count();
        assert!((test_pos as f64 - 0.2 * 2_242.0).abs() <= 1.0, "test_pos {}", test_pos);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let a = split(synthetic(50, 10), 0.25, true, 42).unwrap();
        let b = split(synthetic(50, 10), 0.25, true, 42).unwrap();
        assert_eq!(a.splits, b.splits);
        let c = split(synthetic(50, 10), 0.25, true, 43).unwrap();
        assert_ne!(a.splits, c.splits);
    }

    #[test]
    fn split_is_a_partition() {
        let corpus = split(synthetic(33, 14), 0.3, true, 5).unwrap();
        assert_eq!(corpus.train().count() + corpus.test().count(), 47);
        assert_eq!(corpus.splits.len(), corpus.records.len());
    }

    #[test]
    fn split_single_class_degenerates_with_flag() {
        let corpus = split(synthetic(10, 0), 0.2, true, 3).unwrap();
        assert!(corpus.stratify_degenerated);
        assert_eq!(corpus.test().count(), 2);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(matches!(split(synthetic(4, 4), 0.0, true, 1), Err(DataError::BadFraction(_))));
        assert!(matches!(split(synthetic(4, 4), 1.0, true, 1), Err(DataError::BadFraction(_))));
    }

    #[test]
    fn class_report_full_scale_fractions() {
        let r = class_report(&synthetic(29_720, 2_242)).unwrap();
        assert_eq!(r.counts, [29_720, 2_242]);
        assert!((r.majority_fraction - 0.9299).abs() < 1e-4);
    }

    #[test]
    fn class_report_degenerate_and_balanced() {
        let single = class_report(&synthetic(5, 0)).unwrap();
        assert_eq!(single.majority_fraction, 1.0);
        let balanced = class_report(&synthetic(6, 6)).unwrap();
        assert_eq!(balanced.majority_fraction, 0.5);
    }
}
