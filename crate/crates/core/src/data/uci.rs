//! Converter for the UCI character-trajectories archive (`mixoutALL_shifted.mat`).
//!
//! The archive holds a `mixout` cell array of `3 × L` pen trajectories
//! (x velocity, y velocity, pen force) and a `consts` struct whose
//! `charlabels` field gives the 1-based class of each trajectory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::matfile::{MatFile, MatValue};
use super::{save_jsonl, DatasetBundle, LabeledSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const UCI_SEQUENCE_LENGTH: usize = 206;
/// Canonical train/val/test sizes for the full 2858-sample archive.
pub const UCI_SPLIT_SIZES: [usize; 3] = [1383, 606, 869];
const UCI_TOTAL: usize = 2858;
const UCI_FILE_NAME: &str = "mixoutALL_shifted.mat";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UciConversion {
    pub records: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub length: usize,
    /// Sequences end-padded with zeros / truncated to reach the fixed length.
    pub padded: usize,
    pub truncated: usize,
}

/// Converts the archive at `source` (the `.mat` file or a directory holding
/// it) into the JSONL dataset format at `out`.
///
/// Every sequence is end-padded with zeros or truncated to 206 steps. Splits
/// come from a seeded shuffle: 1383/606/869 for the full archive, the same
/// proportions otherwise.
pub fn convert_uci_charset(source: impl AsRef<Path>, out: impl AsRef<Path>, seed: u64) -> Result<UciConversion> {
    let sequences = read_sequences(source.as_ref())?;
    let padded = sequences.iter().filter(|s| s.2 < UCI_SEQUENCE_LENGTH).count();
    let truncated = sequences.iter().filter(|s| s.2 > UCI_SEQUENCE_LENGTH).count();
    let bundle = split_bundle(sequences, seed);
    let sizes = [bundle.train.len(), bundle.val.len(), bundle.test.len()];
    let note = format!(
        "UCI character trajectories; sequences end-padded with zeros or truncated to {UCI_SEQUENCE_LENGTH} steps; \
         labels are 0-based; split by seeded shuffle (seed {seed}); values are unnormalized"
    );
    save_jsonl(out, &bundle, &note)?;
    Ok(UciConversion {
        records: sizes.iter().sum(),
        train: sizes[0],
        val: sizes[1],
        test: sizes[2],
        num_classes: bundle.num_classes,
        channels: 3,
        length: UCI_SEQUENCE_LENGTH,
        padded,
        truncated,
    })
}

fn resolve(source: &Path) -> PathBuf {
    if source.is_dir() {
        source.join(UCI_FILE_NAME)
    } else {
        source.to_path_buf()
    }
}

/// `(label, padded sequence, original length)` in archive order.
fn read_sequences(source: &Path) -> Result<Vec<(usize, Tensor, usize)>> {
    let path = resolve(source);
    let bytes = fs::read(&path).map_err(|e| Error::Conversion(format!("cannot read {}: {e}", path.display())))?;
    let mat = MatFile::parse(&bytes)?;

    let Some(MatValue::Cell { items, .. }) = mat.get("mixout") else {
        return Err(Error::Conversion("archive has no `mixout` cell array".into()));
    };
    let labels = mat
        .get("consts")
        .and_then(|c| c.field("charlabels"))
        .and_then(MatValue::as_numeric)
        .ok_or_else(|| Error::Conversion("archive has no `consts.charlabels`".into()))?;
    if labels.numel() != items.len() {
        return Err(Error::Conversion(format!(
            "{} labels for {} trajectories",
            labels.numel(),
            items.len()
        )));
    }

    let mut out = Vec::with_capacity(items.len());
    for (i, (item, &label)) in items.iter().zip(&labels.data).enumerate() {
        let arr = item
            .as_numeric()
            .ok_or_else(|| Error::Conversion(format!("trajectory {i} is not numeric")))?;
        if arr.dims.len() != 2 {
            return Err(Error::Conversion(format!("trajectory {i} has dims {:?}", arr.dims)));
        }
        // channels along rows; tolerate the transposed layout
        let (len, get): (usize, Box<dyn Fn(usize, usize) -> f64>) = match (arr.dims[0], arr.dims[1]) {
            (3, l) => (l, Box::new(|c, t| arr.at(c, t))),
            (l, 3) => (l, Box::new(|c, t| arr.at(t, c))),
            _ => {
                return Err(Error::Conversion(format!(
                    "trajectory {i} has dims {:?}, expected 3 channels",
                    arr.dims
                )))
            }
        };
        if label < 1.0 || label.fract() != 0.0 {
            return Err(Error::Conversion(format!("trajectory {i} has invalid label {label}")));
        }
        let mut data = vec![0.0; 3 * UCI_SEQUENCE_LENGTH];
        for c in 0..3 {
            for t in 0..len.min(UCI_SEQUENCE_LENGTH) {
                let v = get(c, t);
                if !v.is_finite() {
                    return Err(Error::Conversion(format!("trajectory {i} contains a non-finite value")));
                }
                data[c * UCI_SEQUENCE_LENGTH + t] = v;
            }
        }
        let tensor = Tensor::new(vec![3, UCI_SEQUENCE_LENGTH], data)?;
        out.push((label as usize - 1, tensor, len));
    }
    if out.is_empty() {
        return Err(Error::Conversion("archive contains no trajectories".into()));
    }
    Ok(out)
}

fn split_sizes(n: usize) -> [usize; 3] {
    if n == UCI_TOTAL {
        return UCI_SPLIT_SIZES;
    }
    let scale = |k: usize| ((n * k) as f64 / UCI_TOTAL as f64).round() as usize;
    let train = scale(UCI_SPLIT_SIZES[0]).clamp(1, n);
    let val = scale(UCI_SPLIT_SIZES[1]).min(n - train);
    [train, val, n - train - val]
}

/// Assigns sequences to splits by a seeded shuffle.
fn split_bundle(sequences: Vec<(usize, Tensor, usize)>, seed: u64) -> DatasetBundle {
    let n = sequences.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [train_n, val_n, _] = split_sizes(n);

    let mut bundle = DatasetBundle {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        num_classes: sequences.iter().map(|s| s.0 + 1).max().unwrap_or(0),
        stats: None,
    };
    let mut slots: Vec<Option<(usize, Tensor, usize)>> = sequences.into_iter().map(Some).collect();
    for (rank, &idx) in order.iter().enumerate() {
        let (label, channels, _) = slots[idx].take().expect("each index visited once");
        let seq = LabeledSequence {
            id: format!("uci-{idx:04}"),
            label,
            channels,
        };
        if rank < train_n {
            bundle.train.push(seq);
        } else if rank < train_n + val_n {
            bundle.val.push(seq);
        } else {
            bundle.test.push(seq);
        }
    }
    for split in [&mut bundle.train, &mut bundle.val, &mut bundle.test] {
        split.sort_by(|a, b| a.id.cmp(&b.id));
    }
    bundle
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_full_and_scaled() {
        assert_eq!(split_sizes(2858), [1383, 606, 869]);
        let s = split_sizes(100);
        assert_eq!(s.iter().sum::<usize>(), 100);
        assert_eq!(s, [48, 21, 31]);
        assert_eq!(split_sizes(1), [1, 0, 0]);
    }

    #[test]
    fn missing_source_is_conversion_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = convert_uci_charset(dir.path().join("nope.mat"), dir.path().join("o.jsonl"), 42).unwrap_err();
        assert!(matches!(err, Error::Conversion(_)));
    }
}
