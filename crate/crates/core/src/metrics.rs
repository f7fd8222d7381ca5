//! Global average precision over pooled, confidence-sorted top-k predictions.

use std::collections::{BTreeMap, BTreeSet};

use crate::classifiers::PredictionSet;
use crate::data::FrameSequence;
use crate::error::{Error, Result};

/// Ground-truth label sets keyed by video id.
pub type TruthSet = BTreeMap<String, BTreeSet<usize>>;

/// Builds a truth table from dataset samples.
pub fn truth_from_samples<'a>(samples: impl IntoIterator<Item = &'a FrameSequence>) -> TruthSet {
    samples
        .into_iter()
        .map(|s| (s.id.clone(), s.labels.iter().copied().collect()))
        .collect()
}

/// How the positive count `m` in the GAP denominator is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GapMMode {
    /// Correct entries within the pooled top-k list.
    #[default]
    InPredictions,
    /// Ground-truth positives of the predicted videos, capped at k per video.
    GroundTruth,
}

impl GapMMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GapMMode::InPredictions => "in_predictions",
            GapMMode::GroundTruth => "ground_truth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "in_predictions" => Ok(GapMMode::InPredictions),
            "ground_truth" => Ok(GapMMode::GroundTruth),
            other => Err(Error::argument(format!("unknown m mode {other:?}"))),
        }
    }
}

/// One pooled prediction, ordered by confidence descending with ties broken
/// by ascending video id, then ascending label.
struct PooledEntry {
    confidence: f64,
    video_index: usize,
    label: usize,
    correct: bool,
}

fn pool_entries(
    preds: &PredictionSet,
    truth: &TruthSet,
    k: usize,
) -> Result<(Vec<PooledEntry>, usize)> {
    let mut entries = Vec::new();
    let mut truth_positives = 0usize;
    for (video_index, (id, scored)) in preds.iter().enumerate() {
        let labels = truth
            .get(id)
            .ok_or_else(|| Error::data(format!("no ground truth for video {id:?}")))?;
        truth_positives += labels.len().min(k);
        for &(label, confidence) in scored.iter().take(k) {
            entries.push(PooledEntry {
                confidence,
                video_index,
                label,
                correct: labels.contains(&label),
            });
        }
    }
    entries.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.video_index.cmp(&b.video_index))
            .then(a.label.cmp(&b.label))
    });
    Ok((entries, truth_positives))
}

fn positive_count(entries: &[PooledEntry], truth_positives: usize, mode: GapMMode) -> usize {
    match mode {
        GapMMode::InPredictions => entries.iter().filter(|e| e.correct).count(),
        GapMMode::GroundTruth => truth_positives,
    }
}

/// GAP over the pooled top-k predictions of all videos:
/// `Σ_i p(i) · Δr(i)` where `p(i)` is precision over the first `i` pooled
/// entries and `Δr(i)` is `1/m` for a correct entry, else 0.
/// Returns 0 when there are no positives.
pub fn gap_at(preds: &PredictionSet, truth: &TruthSet, k: usize, mode: GapMMode) -> Result<f64> {
    if k == 0 {
        return Err(Error::argument("k must be >= 1"));
    }
    let (entries, truth_positives) = pool_entries(preds, truth, k)?;
    let m = positive_count(&entries, truth_positives, mode);
    if m == 0 {
        return Ok(0.0);
    }
    let mut correct_so_far = 0usize;
    let mut total = 0.0;
    for (i, entry) in entries.iter().enumerate() {
        if entry.correct {
            correct_so_far += 1;
            let precision = correct_so_far as f64 / (i + 1) as f64;
            total += precision / m as f64;
        }
    }
    Ok(total)
}

/// Naive restatement of [`gap_at`] for cross-checking: recomputes the
/// precision of every prefix from scratch, O(N²).
pub fn gap_oracle(preds: &PredictionSet, truth: &TruthSet, k: usize, mode: GapMMode) -> Result<f64> {
    if k == 0 {
        return Err(Error::argument("k must be >= 1"));
    }
    let (entries, truth_positives) = pool_entries(preds, truth, k)?;
    let m = positive_count(&entries, truth_positives, mode);
    if m == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..entries.len() {
        let delta_r = if entries[i].correct { 1.0 / m as f64 } else { 0.0 };
        if delta_r > 0.0 {
            let mut correct = 0usize;
            for entry in &entries[..=i] {
                if entry.correct {
                    correct += 1;
                }
            }
            total += (correct as f64 / (i + 1) as f64) * delta_r;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::SeededRng;
    use proptest::prelude::*;

    fn truth(entries: &[(&str, &[usize])]) -> TruthSet {
        entries
            .iter()
            .map(|(id, labels)| (id.to_string(), labels.iter().copied().collect()))
            .collect()
    }

    #[test]
    fn single_correct_prediction_is_one() {
        let mut preds = PredictionSet::new();
        preds.insert("a", vec![(3, 0.9)]).unwrap();
        let t = truth(&[("a", &[3])]);
        assert_eq!(gap_at(&preds, &t, 20, GapMMode::InPredictions).unwrap(), 1.0);
        assert_eq!(gap_oracle(&preds, &t, 20, GapMMode::InPredictions).unwrap(), 1.0);
    }

    #[test]
    fn all_wrong_is_zero() {
        let mut preds = PredictionSet::new();
        preds.insert("a", vec![(1, 0.9), (2, 0.7)]).unwrap();
        preds.insert("b", vec![(0, 0.8)]).unwrap();
        let t = truth(&[("a", &[5]), ("b", &[5])]);
        assert_eq!(gap_at(&preds, &t, 20, GapMMode::InPredictions).unwrap(), 0.0);
        assert_eq!(gap_oracle(&preds, &t, 20, GapMMode::InPredictions).unwrap(), 0.0);
    }

    #[test]
    fn two_video_worked_example() {
        // Pooled order: 0.9 correct, 0.8 wrong, 0.7 correct, 0.6 correct,
        // giving (1 + 2/3 + 3/4) / 3.
        let mut preds = PredictionSet::new();
        preds.insert("a", vec![(1, 0.9), (2, 0.8)]).unwrap();
        preds.insert("b", vec![(3, 0.7), (4, 0.6)]).unwrap();
        let t = truth(&[("a", &[1]), ("b", &[3, 4])]);
        let expect = (1.0 + 2.0 / 3.0 + 3.0 / 4.0) / 3.0;
        let got = gap_at(&preds, &t, 20, GapMMode::InPredictions).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.805556).abs() < 1e-6);
        let oracle = gap_oracle(&preds, &t, 20, GapMMode::InPredictions).unwrap();
        assert!((got - oracle).abs() < 1e-15);
    }

    #[test]
    fn unknown_video_is_a_data_error() {
        let mut preds = PredictionSet::new();
        preds.insert("ghost", vec![(0, 0.5)]).unwrap();
        let t = truth(&[("a", &[0])]);
        assert!(matches!(
            gap_at(&preds, &t, 20, GapMMode::InPredictions),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn ground_truth_mode_counts_capped_truth_positives() {
        let mut preds = PredictionSet::new();
        preds.insert("a", vec![(1, 0.9)]).unwrap();
        // Video has 2 truth labels but only 1 prediction; m = 2 in
        // ground-truth mode, 1 in in-predictions mode.
        let t = truth(&[("a", &[1, 2])]);
        let in_preds = gap_at(&preds, &t, 20, GapMMode::InPredictions).unwrap();
        let gt = gap_at(&preds, &t, 20, GapMMode::GroundTruth).unwrap();
        assert_eq!(in_preds, 1.0);
        assert!((gt - 0.5).abs() < 1e-15);
    }

    fn random_instance(seed: u64) -> (PredictionSet, TruthSet) {
        let mut rng = SeededRng::new(seed);
        let videos = 1 + rng.below(10) as usize;
        let vocab = 8usize;
        let mut preds = PredictionSet::new();
        let mut t = TruthSet::new();
        for v in 0..videos {
            let id = format!("v{v}");
            let n_preds = 1 + rng.below(5) as usize;
            let mut labels: Vec<usize> = (0..vocab).collect();
            rng.shuffle(&mut labels);
            let scored: Vec<(usize, f64)> = labels[..n_preds]
                .iter()
                // Coarse confidences so ties actually occur.
                .map(|&l| (l, (rng.below(5) as f64) / 4.0))
                .collect();
            preds.insert(&id, scored).unwrap();
            let n_truth = rng.below(4) as usize;
            let mut truth_labels: Vec<usize> = (0..vocab).collect();
            rng.shuffle(&mut truth_labels);
            t.insert(id, truth_labels[..n_truth].iter().copied().collect());
        }
        (preds, t)
    }

    #[test]
    fn oracle_agreement_on_200_random_instances() {
        for seed in 0..200 {
            let (preds, t) = random_instance(seed);
            for mode in [GapMMode::InPredictions, GapMMode::GroundTruth] {
                let fast = gap_at(&preds, &t, 3, mode).unwrap();
                let slow = gap_oracle(&preds, &t, 3, mode).unwrap();
                assert!(
                    (fast - slow).abs() < 1e-12,
                    "seed {seed}: {fast} vs {slow}"
                );
                assert!((0.0..=1.0).contains(&fast));
            }
        }
    }

    #[test]
    fn equal_confidence_input_order_does_not_matter() {
        // Same scores presented in different orders canonicalize identically.
        let t = truth(&[("a", &[1, 2]), ("b", &[7])]);
        let mut p1 = PredictionSet::new();
        p1.insert("a", vec![(1, 0.5), (2, 0.5), (3, 0.5)]).unwrap();
        p1.insert("b", vec![(7, 0.5)]).unwrap();
        let mut p2 = PredictionSet::new();
        p2.insert("a", vec![(3, 0.5), (2, 0.5), (1, 0.5)]).unwrap();
        p2.insert("b", vec![(7, 0.5)]).unwrap();
        let g1 = gap_at(&p1, &t, 20, GapMMode::InPredictions).unwrap();
        let g2 = gap_at(&p2, &t, 20, GapMMode::InPredictions).unwrap();
        assert_eq!(g1, g2);
    }

    proptest! {
        // Ranking-only dependence: strictly monotone transforms of all
        // confidences leave GAP unchanged.
        #[test]
        fn invariant_under_monotone_transform(seed in 0u64..500) {
            let (preds, t) = random_instance(seed);
            let base = gap_at(&preds, &t, 3, GapMMode::InPredictions).unwrap();
            let mut squashed = PredictionSet::new();
            for (id, scored) in preds.iter() {
                let mapped: Vec<(usize, f64)> = scored
                    .iter()
                    .map(|&(l, c)| (l, 0.1 + 0.8 * (c / (1.0 + c))))
                    .collect();
                squashed.insert(id, mapped).unwrap();
            }
            let transformed = gap_at(&squashed, &t, 3, GapMMode::InPredictions).unwrap();
            prop_assert!((base - transformed).abs() < 1e-12);
        }

        // Appending a wrong prediction below every other confidence never
        // increases GAP.
        #[test]
        fn trailing_wrong_prediction_never_helps(seed in 0u64..300) {
            let (preds, t) = random_instance(seed);
            let base = gap_at(&preds, &t, 6, GapMMode::InPredictions).unwrap();
            let mut extended = PredictionSet::new();
            let mut first = true;
            for (id, scored) in preds.iter() {
                let mut scored = scored.to_vec();
                if first {
                    // Label 9 is outside every truth set (vocab is 8).
                    scored.push((9, 0.0001));
                    first = false;
                }
                extended.insert(id, scored).unwrap();
            }
            let with_junk = gap_at(&extended, &t, 6, GapMMode::InPredictions).unwrap();
            prop_assert!(with_junk <= base + 1e-12);
        }

        #[test]
        fn gap_is_always_in_unit_interval(seed in 0u64..500) {
            let (preds, t) = random_instance(seed);
            let g = gap_at(&preds, &t, 4, GapMMode::InPredictions).unwrap();
            prop_assert!((0.0..=1.0).contains(&g));
        }
    }
}
