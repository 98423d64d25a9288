//! Labeled time-series datasets: the JSONL on-disk format, per-channel
//! z-normalization, a synthetic fixture generator and the UCI
//! character-trajectories converter.
//!
//! One JSONL record per line:
//!
//! ```text
//! {"id":"uci-0001","split":"train","label":3,"channels":[[...],[...],[...]]}
//! ```
//!
//! An optional first line carrying a `format_version` field (and no `split`)
//! is a header and is skipped by the loader.

mod matfile;
mod synth;
mod uci;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use matfile::{MatArray, MatFile, MatValue};
pub use synth::synth_generate;
pub use uci::{convert_uci_charset, UciConversion, UCI_SEQUENCE_LENGTH, UCI_SPLIT_SIZES};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

/// One multichannel series `[C, T]` with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub id: String,
    pub label: usize,
    pub channels: Tensor,
}

/// Per-channel mean and (population) standard deviation of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let t = x.dim(1);
        let mut out = x.clone();
        for (c, row) in out.data_mut().chunks_mut(t).enumerate() {
            for v in row {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<LabeledSequence>,
    pub val: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
    pub num_classes: usize,
    /// Set once the bundle has been normalized.
    pub stats: Option<NormalizationStats>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    split: Split,
    label: usize,
    channels: Vec<Vec<f64>>,
}

impl DatasetBundle {
    pub fn is_normalized(&self) -> bool {
        self.stats.is_some()
    }

    pub fn split(&self, split: Split) -> &[LabeledSequence] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn channels(&self) -> usize {
        self.train.first().map_or(0, |s| s.channels.dim(0))
    }

    pub fn iter_all(&self) -> impl Iterator<Item = (Split, &LabeledSequence)> {
        self.train
            .iter()
            .map(|s| (Split::Train, s))
            .chain(self.val.iter().map(|s| (Split::Val, s)))
            .chain(self.test.iter().map(|s| (Split::Test, s)))
    }

    /// Channel counts agree, labels are in range and ids are unique across splits.
    pub fn check_consistency(&self) -> Result<()> {
        let c = self.channels();
        let mut seen = HashSet::new();
        for (split, s) in self.iter_all() {
            if s.channels.dim(0) != c {
                return Err(Error::Config(format!(
                    "sequence {} has {} channels, expected {c}",
                    s.id,
                    s.channels.dim(0)
                )));
            }
            if s.label >= self.num_classes {
                return Err(Error::Config(format!(
                    "sequence {} label {} out of range",
                    s.id, s.label
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate id {} (in {split})", s.id)));
            }
        }
        Ok(())
    }

    /// One record per line in train, val, test order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (split, s) in self.iter_all() {
            let t = s.channels.dim(1);
            let record = Record {
                id: s.id.clone(),
                split,
                label: s.label,
                channels: s.channels.data().chunks(t).map(<[f64]>::to_vec).collect(),
            };
            out.push_str(&serde_json::to_string(&record).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical JSONL rendering of the stored values.
    pub fn checksum(&self) -> String {
        hex_digest(self.to_jsonl().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, path)
}

fn parse_jsonl(text: &str, path: &Path) -> Result<DatasetBundle> {
    let mut bundle = DatasetBundle {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        num_classes: 0,
        stats: None,
    };
    let mut ids = HashSet::new();
    let mut channels = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::load(path, Some(line_no), format!("malformed record: {e}")))?;
        if line_no == 1 && value.get("format_version").is_some() && value.get("split").is_none() {
            let version = value["format_version"].as_u64();
            if version != Some(DATASET_FORMAT_VERSION as u64) {
                return Err(Error::load(
                    path,
                    Some(1),
                    format!("unsupported format_version {version:?}"),
                ));
            }
            continue;
        }
        let record: Record = serde_json::from_value(value)
            .map_err(|e| Error::load(path, Some(line_no), format!("malformed record: {e}")))?;
        let c = record.channels.len();
        let t = record.channels.first().map_or(0, Vec::len);
        if c == 0 || t == 0 {
            return Err(Error::load(path, Some(line_no), "record has no channel data"));
        }
        if record.channels.iter().any(|ch| ch.len() != t) {
            return Err(Error::load(path, Some(line_no), "ragged channel lengths"));
        }
        if *channels.get_or_insert(c) != c {
            return Err(Error::load(
                path,
                Some(line_no),
                format!("record has {c} channels, expected {}", channels.unwrap()),
            ));
        }
        if !ids.insert(record.id.clone()) {
            return Err(Error::load(path, Some(line_no), format!("duplicate id {}", record.id)));
        }
        let data: Vec<f64> = record.channels.concat();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::load(path, Some(line_no), "non-finite value"));
        }
        bundle.num_classes = bundle.num_classes.max(record.label + 1);
        let seq = LabeledSequence {
            id: record.id,
            label: record.label,
            channels: Tensor::new(vec![c, t], data).map_err(|e| Error::load(path, Some(line_no), e.to_string()))?,
        };
        match record.split {
            Split::Train => bundle.train.push(seq),
            Split::Val => bundle.val.push(seq),
            Split::Test => bundle.test.push(seq),
        }
    }
    if bundle.train.is_empty() {
        return Err(Error::load(path, None, "train split is empty"));
    }
    if bundle.test.is_empty() {
        return Err(Error::load(path, None, "test split is empty"));
    }
    Ok(bundle)
}

/// Writes the bundle's stored values as JSONL, preceded by a header line.
pub fn save_jsonl(path: impl AsRef<Path>, bundle: &DatasetBundle, note: &str) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::json!({
        "format_version": DATASET_FORMAT_VERSION,
        "num_classes": bundle.num_classes,
        "note": note,
    });
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
    file.write_all(bundle.to_jsonl().as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Fits per-channel statistics on the training split and applies them to all
/// three splits. A bundle can only be normalized once.
pub fn normalize(bundle: &DatasetBundle) -> Result<DatasetBundle> {
    if bundle.is_normalized() {
        return Err(Error::Usage("bundle is already normalized".into()));
    }
    let stats = fit_stats(&bundle.train)?;
    let apply = |split: &[LabeledSequence]| -> Vec<LabeledSequence> {
        split
            .iter()
            .map(|s| LabeledSequence {
                id: s.id.clone(),
                label: s.label,
                channels: stats.apply(&s.channels),
            })
            .collect()
    };
    Ok(DatasetBundle {
        train: apply(&bundle.train),
        val: apply(&bundle.val),
        test: apply(&bundle.test),
        num_classes: bundle.num_classes,
        stats: Some(stats),
    })
}

fn fit_stats(train: &[LabeledSequence]) -> Result<NormalizationStats> {
    let c = train
        .first()
        .ok_or_else(|| Error::Config("cannot normalize an empty train split".into()))?
        .channels
        .dim(0);
    let mut mean = vec![0.0; c];
    let mut count = vec![0usize; c];
    for s in train {
        let t = s.channels.dim(1);
        for (ch, row) in s.channels.data().chunks(t).enumerate() {
            mean[ch] += row.iter().sum::<f64>();
            count[ch] += t;
        }
    }
    for (m, n) in mean.iter_mut().zip(&count) {
        *m /= *n as f64;
    }
    let mut var = vec![0.0; c];
    for s in train {
        let t = s.channels.dim(1);
        for (ch, row) in s.channels.data().chunks(t).enumerate() {
            var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    let std: Vec<f64> = var.iter().zip(&count).map(|(v, n)| (v / *n as f64).sqrt()).collect();
    for (ch, (&s, &m)) in std.iter().zip(&mean).enumerate() {
        if s.is_nan() || s <= 1e-12 * m.abs().max(1.0) {
            return Err(Error::Config(format!(
                "channel {ch} has zero variance in the train split"
            )));
        }
    }
    Ok(NormalizationStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, text: &str) -> std::path::PathBuf {
        let p = dir.path().join("d.jsonl");
        fs::write(&p, text).unwrap();
        p
    }

    const THREE: &str = r#"{"id":"a","split":"train","label":0,"channels":[[1,2,3],[0,1,0]]}
{"id":"b","split":"val","label":1,"channels":[[2,2,2],[1,1,1]]}
{"id":"c","split":"test","label":2,"channels":[[0,0,1],[5,5,5]]}
"#;

    #[test]
    fn three_records_one_per_split() {
        let dir = tempfile::tempdir().unwrap();
        let b = load_jsonl(write(&dir, THREE)).unwrap();
        assert_eq!((b.train.len(), b.val.len(), b.test.len()), (1, 1, 1));
        assert_eq!(b.num_classes, 3);
        assert_eq!(b.channels(), 2);
        assert_eq!(b.test[0].channels.shape(), &[2, 3]);
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"id":"c","split":"test","label":0,"channels":[[0,0,1]]}"#;
        assert!(matches!(load_jsonl(write(&dir, text)), Err(Error::Load { .. })));
    }

    #[test]
    fn malformed_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{THREE}{{\"id\":\"d\",\"split\":\"train\"\n");
        match load_jsonl(write(&dir, &text)) {
            Err(Error::Load { line, .. }) => assert_eq!(line, Some(4)),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = THREE.replace("[[1,2,3],[0,1,0]]", "[[1,2,3],[0,1]]");
        match load_jsonl(write(&dir, &text)) {
            Err(Error::Load { line, message, .. }) => {
                assert_eq!(line, Some(1));
                assert!(message.contains("ragged"));
            }
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = THREE.replace("\"id\":\"b\"", "\"id\":\"a\"");
        assert!(load_jsonl(write(&dir, &text)).is_err());
    }

    #[test]
    fn save_then_load_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let b = synth_generate(3, 5, 2, 17, 11);
        let p = dir.path().join("s.jsonl");
        save_jsonl(&p, &b, "fixture").unwrap();
        let back = load_jsonl(&p).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.checksum(), b.checksum());
    }

    #[test]
    fn normalize_fits_train_only() {
        let b = synth_generate(2, 20, 3, 30, 5);
        let n = normalize(&b).unwrap();
        let stats = n.stats.as_ref().unwrap();
        assert_eq!(stats.mean.len(), 3);
        let refit = fit_stats(&n.train).unwrap();
        for c in 0..3 {
            assert!(refit.mean[c].abs() < 1e-9);
            assert!((refit.std[c] - 1.0).abs() < 1e-9);
        }
        let test_fit = fit_stats(&n.test).unwrap();
        assert!(test_fit.mean.iter().any(|m| *m != 0.0));
        assert!(matches!(normalize(&n), Err(Error::Usage(_))));
    }

    #[test]
    fn constant_channel_cannot_be_normalized() {
        let mut b = synth_generate(2, 5, 2, 10, 1);
        for s in &mut b.train {
            let t = s.channels.dim(1);
            s.channels.data_mut()[t..].fill(4.2);
        }
        assert!(matches!(normalize(&b), Err(Error::Config(_))));
    }
}
