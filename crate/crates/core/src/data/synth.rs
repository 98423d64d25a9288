use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetBundle, LabeledSequence};
use crate::tensor::Tensor;

const NOISE_STD: f64 = 0.3;

/// Noisy sinusoids whose frequency and phase depend on the class.
///
/// Each class is split 60/20/20 into train/val/test. Train always receives at
/// least one sample; with a single sample per class it receives everything.
pub fn synth_generate(
    num_classes: usize,
    per_class: usize,
    channels: usize,
    length: usize,
    seed: u64,
) -> DatasetBundle {
    let num_classes = num_classes.max(1);
    let per_class = per_class.max(1);
    let channels = channels.max(1);
    let length = length.max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut bundle = DatasetBundle {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        num_classes,
        stats: None,
    };

    let (n_train, n_test) = split_counts(per_class);
    for class in 0..num_classes {
        let cycles = 1.0 + class as f64;
        for i in 0..per_class {
            let jitter: f64 = rng.random_range(-0.3..0.3);
            let amplitude: f64 = rng.random_range(0.8..1.2);
            let mut data = Vec::with_capacity(channels * length);
            for c in 0..channels {
                let phase = 0.9 * (class + c) as f64 + jitter;
                for t in 0..length {
                    let angle = 2.0 * PI * cycles * t as f64 / length as f64 + phase;
                    data.push(amplitude * angle.sin() + 0.2 * c as f64 + noise.sample(&mut rng));
                }
            }
            let seq = LabeledSequence {
                id: format!("synth-{class}-{i}"),
                label: class,
                channels: Tensor::new(vec![channels, length], data).expect("shape matches data"),
            };
            if i < n_train {
                bundle.train.push(seq);
            } else if i < n_train + n_test {
                bundle.test.push(seq);
            } else {
                bundle.val.push(seq);
            }
        }
    }
    bundle
}

/// `(train, test)` counts per class; the remainder is validation.
fn split_counts(n: usize) -> (usize, usize) {
    let train = ((0.6 * n as f64).round() as usize).clamp(1, n);
    let test = ((0.2 * n as f64).round() as usize).max(1).min(n - train);
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bundle() {
        assert_eq!(synth_generate(3, 10, 2, 20, 7), synth_generate(3, 10, 2, 20, 7));
        assert_ne!(synth_generate(3, 10, 2, 20, 7), synth_generate(3, 10, 2, 20, 8));
    }

    #[test]
    fn split_rounding() {
        assert_eq!(split_counts(1), (1, 0));
        assert_eq!(split_counts(2), (1, 1));
        assert_eq!(split_counts(5), (3, 1));
        assert_eq!(split_counts(50), (30, 10));
    }

    #[test]
    fn single_sample_goes_to_train() {
        let b = synth_generate(4, 1, 1, 8, 0);
        assert_eq!(b.train.len(), 4);
        assert!(b.val.is_empty() && b.test.is_empty());
    }

    #[test]
    fn sixty_twenty_twenty() {
        let b = synth_generate(2, 50, 3, 16, 1);
        assert_eq!((b.train.len(), b.val.len(), b.test.len()), (60, 20, 20));
        b.check_consistency().unwrap();
    }
}
