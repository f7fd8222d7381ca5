//! Video sample model, on-disk formats, label vocabulary statistics, and a
//! seeded synthetic dataset generator.
//!
//! A dataset file is line-delimited JSON: line 1 is the metadata object
//! `{"version":1,"dim":D,"visual_dim":V,"audio_dim":A,"vocab":C}`, every
//! later line is one sample `{"id":"...","labels":[...],"frames":[[...]]}`.
//! Frame values are stored at 32-bit precision on disk and widened to 64-bit
//! in memory; everything this crate creates is already quantized to that
//! grid, so write → load round-trips are bit-exact.

mod jsonl;
mod predictions;
mod synthetic;

pub use jsonl::{load_dataset, write_dataset};
pub use predictions::{load_predictions, write_predictions};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numeric::Tensor2D;

/// One video: a T x D matrix of frame features plus id and label set.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub id: String,
    /// Frame t is row t.
    pub frames: Tensor2D,
    /// Sorted, duplicate-free label indices.
    pub labels: Vec<usize>,
}

/// Dataset-wide dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetMeta {
    /// Feature dimension D of every frame; visual_dim + audio_dim == dim.
    pub dim: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    /// Number of classes.
    pub vocab: usize,
    /// Number of samples, filled in by loaders and generators.
    pub samples: usize,
}

impl DatasetMeta {
    pub fn validate(&self) -> Result<()> {
        if self.visual_dim + self.audio_dim != self.dim {
            return Err(Error::data(format!(
                "visual_dim {} + audio_dim {} != dim {}",
                self.visual_dim, self.audio_dim, self.dim
            )));
        }
        if self.vocab == 0 {
            return Err(Error::data("vocab size must be >= 1"));
        }
        Ok(())
    }
}

/// Label vocabulary with per-label positive counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    counts: Vec<usize>,
}

impl LabelVocabulary {
    pub fn size(&self) -> usize {
        self.counts.len()
    }

    /// Number of videos containing `label`.
    pub fn count(&self, label: usize) -> usize {
        self.counts[label]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn from_counts(counts: Vec<usize>) -> Self {
        LabelVocabulary { counts }
    }
}

/// Counts, per label, how many videos contain it.
pub fn build_vocabulary<'a>(
    samples: impl IntoIterator<Item = &'a FrameSequence>,
    vocab_size: usize,
) -> Result<LabelVocabulary> {
    let mut counts = vec![0usize; vocab_size];
    for sample in samples {
        for &label in &sample.labels {
            if label >= vocab_size {
                return Err(Error::data(format!(
                    "video {:?} has label {label} outside vocabulary of size {vocab_size}",
                    sample.id
                )));
            }
            counts[label] += 1;
        }
    }
    Ok(LabelVocabulary { counts })
}

/// Rounds a value to the nearest 32-bit float, keeping the 64-bit type.
/// All frame values in this crate live on this grid (the on-disk precision).
#[inline]
pub(crate) fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, labels: Vec<usize>) -> FrameSequence {
        FrameSequence {
            id: id.into(),
            frames: Tensor2D::zeros(1, 2),
            labels,
        }
    }

    #[test]
    fn vocabulary_of_empty_dataset_is_all_zero() {
        let vocab = build_vocabulary([], 4).unwrap();
        assert_eq!(vocab.counts(), &[0, 0, 0, 0]);
    }

    #[test]
    fn vocabulary_counts_videos_containing_label() {
        let samples = vec![
            sample("a", vec![0]),
            sample("b", vec![0, 2]),
            sample("c", vec![0]),
        ];
        let vocab = build_vocabulary(&samples, 3).unwrap();
        assert_eq!(vocab.count(0), 3);
        assert_eq!(vocab.count(1), 0);
        assert_eq!(vocab.count(2), 1);
    }

    #[test]
    fn vocabulary_rejects_out_of_range_labels() {
        let samples = vec![sample("a", vec![5])];
        assert!(matches!(
            build_vocabulary(&samples, 3),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn vocabulary_total_matches_label_set_sizes() {
        let spec = SyntheticSpec {
            classes: 6,
            videos: 80,
            frames: 5,
            dim: 4,
            audio_dim: None,
            noise: 0.2,
            multilabel_rate: 0.3,
            seed: 123,
        };
        let (meta, samples) = generate_synthetic(&spec).unwrap();
        let vocab = build_vocabulary(&samples, meta.vocab).unwrap();
        let total: usize = vocab.counts().iter().sum();
        let expected: usize = samples.iter().map(|s| s.labels.len()).sum();
        assert_eq!(total, expected);
    }

    #[test]
    fn meta_validation() {
        let bad = DatasetMeta {
            dim: 5,
            visual_dim: 3,
            audio_dim: 1,
            vocab: 2,
            samples: 0,
        };
        assert!(bad.validate().is_err());
    }
}
