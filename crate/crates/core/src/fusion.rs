//! Two-stage linear weighted fusion of prediction sets: per-model checkpoint
//! fusion first, then fusion across models, with empirical, grid-search, and
//! regression weight strategies.

use std::collections::BTreeMap;

use crate::classifiers::PredictionSet;
use crate::error::{Error, Result};
use crate::metrics::{gap_at, GapMMode, TruthSet};

/// Shipped intra-model weight templates keyed by checkpoint count.
/// Newest checkpoint first.
pub fn intra_template(checkpoints: usize) -> Option<&'static [f64]> {
    match checkpoints {
        3 => Some(&[0.5, 0.3, 0.2]),
        4 => Some(&[0.4, 0.3, 0.2, 0.1]),
        5 => Some(&[0.4, 0.3, 0.2, 0.05, 0.05]),
        _ => None,
    }
}

fn check_universe(sets: &[&PredictionSet]) -> Result<()> {
    let first: Vec<&str> = sets[0].video_ids().collect();
    for (i, set) in sets.iter().enumerate().skip(1) {
        let ids: Vec<&str> = set.video_ids().collect();
        if ids != first {
            return Err(Error::data(format!(
                "prediction source {i} covers a different video universe"
            )));
        }
    }
    Ok(())
}

/// Per-video, per-label weighted sum of source scores. A label missing from
/// a source contributes 0 there. When the weights sum to more than 1 the
/// fused scores are renormalized by that sum so confidences stay within
/// [0, 1]; rankings (and hence GAP) are unaffected.
pub fn fuse_linear(sets: &[&PredictionSet], weights: &[f64]) -> Result<PredictionSet> {
    if sets.is_empty() || sets.len() != weights.len() {
        return Err(Error::argument(format!(
            "{} sources with {} weights",
            sets.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::argument("fusion weights must be finite and >= 0"));
    }
    let weight_sum: f64 = weights.iter().sum();
    if weight_sum <= 0.0 {
        return Err(Error::argument("at least one fusion weight must be > 0"));
    }
    check_universe(sets)?;

    let renorm = if weight_sum > 1.0 { weight_sum } else { 1.0 };
    let mut fused = PredictionSet::new();
    let ids: Vec<String> = sets[0].video_ids().map(str::to_string).collect();
    for id in ids {
        let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
        for (set, &w) in sets.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for &(label, conf) in set.get(&id).unwrap() {
                *scores.entry(label).or_insert(0.0) += w * conf;
            }
        }
        let scored: Vec<(usize, f64)> = scores
            .into_iter()
            .map(|(label, s)| (label, s / renorm))
            .collect();
        fused.insert(id, scored)?;
    }
    Ok(fused)
}

/// Stage 1 fuses each model's checkpoint predictions with its intra-model
/// weights; stage 2 fuses the per-model results with the inter-model weights.
pub fn fuse_two_stage(
    per_model_sets: &[Vec<&PredictionSet>],
    intra_weights: &[Vec<f64>],
    inter_weights: &[f64],
) -> Result<PredictionSet> {
    if per_model_sets.is_empty() {
        return Err(Error::argument("two-stage fusion needs at least one model"));
    }
    if per_model_sets.len() != intra_weights.len() {
        return Err(Error::argument(
            "one intra-model weight vector is needed per model",
        ));
    }
    let mut stage1 = Vec::with_capacity(per_model_sets.len());
    for (sets, weights) in per_model_sets.iter().zip(intra_weights) {
        stage1.push(fuse_linear(sets, weights)?);
    }
    let refs: Vec<&PredictionSet> = stage1.iter().collect();
    fuse_linear(&refs, inter_weights)
}

/// Result of a weight search.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSearch {
    pub weights: Vec<f64>,
    pub gap: f64,
}

const GRID_STEPS: [f64; 4] = [0.05, 0.1, 0.25, 0.5];

/// Exhaustive search over the simplex grid `{w : w_j = n_j·step, Σ w_j = 1}`
/// maximizing GAP on the given truth; ties resolve to the lexicographically
/// smallest weight vector.
pub fn grid_search_weights(
    sets: &[&PredictionSet],
    truth: &TruthSet,
    step: f64,
    k: usize,
) -> Result<WeightSearch> {
    if !(2..=5).contains(&sets.len()) {
        return Err(Error::argument(format!(
            "grid search supports 2 to 5 sources, got {}",
            sets.len()
        )));
    }
    if !GRID_STEPS.contains(&step) {
        return Err(Error::argument(format!(
            "step must be one of {GRID_STEPS:?}, got {step}"
        )));
    }
    check_universe(sets)?;

    let units = (1.0 / step).round() as usize;
    let mut best: Option<WeightSearch> = None;
    let mut assignment = vec![0usize; sets.len()];
    search_compositions(&mut assignment, 0, units, &mut |units_vec| {
        let weights: Vec<f64> = units_vec.iter().map(|&u| u as f64 * step).collect();
        let fused = fuse_linear(sets, &weights)?;
        let gap = gap_at(&fused, truth, k, GapMMode::InPredictions)?;
        // Strictly-better keeps the first (lexicographically smallest) argmax.
        if best.as_ref().map_or(true, |b| gap > b.gap) {
            best = Some(WeightSearch { weights, gap });
        }
        Ok(())
    })?;
    Ok(best.expect("grid is never empty"))
}

/// Visits compositions of `remaining` into the tail slots in lexicographic
/// order of the resulting weight vectors.
fn search_compositions(
    assignment: &mut [usize],
    slot: usize,
    remaining: usize,
    visit: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if slot + 1 == assignment.len() {
        assignment[slot] = remaining;
        return visit(assignment);
    }
    for units in 0..=remaining {
        assignment[slot] = units;
        search_compositions(assignment, slot + 1, remaining - units, visit)?;
    }
    Ok(())
}

/// Least-squares fusion weights: regresses the weighted score sum against
/// binary relevance over every (video, label) pair scored by any source,
/// solved by ridge-regularized normal equations. Negative weights clamp to 0
/// and the rest rescale to sum 1 (uniform if everything clamps).
pub fn regress_weights(sets: &[&PredictionSet], truth: &TruthSet) -> Result<Vec<f64>> {
    if sets.len() < 2 {
        return Err(Error::argument("regression needs at least 2 sources"));
    }
    check_universe(sets)?;
    let n = sets.len();
    let mut xtx = vec![vec![0.0; n]; n];
    let mut xty = vec![0.0; n];

    let ids: Vec<String> = sets[0].video_ids().map(str::to_string).collect();
    let mut row = vec![0.0; n];
    for id in &ids {
        let labels = truth
            .get(id)
            .ok_or_else(|| Error::data(format!("no ground truth for video {id:?}")))?;
        let mut union: BTreeMap<usize, ()> = BTreeMap::new();
        for set in sets {
            for &(label, _) in set.get(id).unwrap() {
                union.insert(label, ());
            }
        }
        for (&label, _) in &union {
            for (j, set) in sets.iter().enumerate() {
                row[j] = set
                    .get(id)
                    .unwrap()
                    .iter()
                    .find(|&&(l, _)| l == label)
                    .map_or(0.0, |&(_, c)| c);
            }
            let y = if labels.contains(&label) { 1.0 } else { 0.0 };
            for a in 0..n {
                for b in 0..n {
                    xtx[a][b] += row[a] * row[b];
                }
                xty[a] += row[a] * y;
            }
        }
    }
    for (a, diag) in xtx.iter_mut().enumerate() {
        diag[a] += 1e-6;
    }
    let mut weights = solve_spd(xtx, xty)?;

    for w in &mut weights {
        if *w < 0.0 {
            *w = 0.0;
        }
    }
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        for w in &mut weights {
            *w /= total;
        }
    } else {
        weights = vec![1.0 / n as f64; n];
    }
    Ok(weights)
}

/// Gaussian elimination with partial pivoting for the small normal-equation
/// systems (n <= 5).
fn solve_spd(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot_row][col].abs() < 1e-12 {
            return Err(Error::numeric("singular normal equations"));
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for col in row + 1..n {
            acc -= a[row][col] * x[col];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}
