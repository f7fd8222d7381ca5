//! Sequence-to-sequence frame transforms applied before aggregation:
//! temporal differencing, multi-scale mean pooling, half-splitting, and
//! frame sampling. All transforms are pure functions of their inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{SeededRng, Tensor2D};

/// One step of a transform pipeline; a pipeline is a list applied left to
/// right, expressed in the training config as e.g.
/// `"transforms": [{"kind": "multiscale", "window": 5}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    Identity,
    TemporalDifference,
    Multiscale { window: usize },
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        if let TransformSpec::Multiscale { window } = self {
            if *window < 1 {
                return Err(Error::config("multiscale window must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn apply(&self, frames: &Tensor2D) -> Result<Tensor2D> {
        match self {
            TransformSpec::Identity => Ok(frames.clone()),
            TransformSpec::TemporalDifference => temporal_difference(frames),
            TransformSpec::Multiscale { window } => multiscale_pool(frames, *window),
        }
    }
}

/// Applies a pipeline of transforms left to right.
pub fn apply_all(specs: &[TransformSpec], frames: &Tensor2D) -> Result<Tensor2D> {
    let mut current = frames.clone();
    for spec in specs {
        current = spec.apply(&current)?;
    }
    Ok(current)
}

/// Differences between adjacent frame pairs: row t of the output is
/// `frames[t+1] - frames[t]`. Emits T-1 rows, no padding.
pub fn temporal_difference(frames: &Tensor2D) -> Result<Tensor2D> {
    let t = frames.rows();
    if t < 2 {
        return Err(Error::argument(format!(
            "temporal difference needs at least 2 frames, got {t}"
        )));
    }
    let mut out = Tensor2D::zeros(t - 1, frames.cols());
    for r in 0..t - 1 {
        let next = frames.row(r + 1);
        let cur = frames.row(r);
        for (o, (n, c)) in out.row_mut(r).iter_mut().zip(next.iter().zip(cur)) {
            *o = n - c;
        }
    }
    Ok(out)
}

/// Slices the sequence into windows of `window` frames and mean-pools each.
/// The final window may be shorter; it is averaged over its true length.
pub fn multiscale_pool(frames: &Tensor2D, window: usize) -> Result<Tensor2D> {
    if window < 1 {
        return Err(Error::argument("pooling window must be >= 1"));
    }
    let t = frames.rows();
    let d = frames.cols();
    let out_rows = t.div_ceil(window);
    let mut out = Tensor2D::zeros(out_rows, d);
    for j in 0..out_rows {
        let start = j * window;
        let end = ((j + 1) * window).min(t);
        let len = (end - start) as f64;
        let row = out.row_mut(j);
        for r in start..end {
            for (o, v) in row.iter_mut().zip(frames.row(r)) {
                *o += v;
            }
        }
        for o in row.iter_mut() {
            *o /= len;
        }
    }
    Ok(out)
}

/// Splits the sequence in two: the first ⌊T/2⌋ frames in order, and the
/// remaining frames in reverse temporal order.
pub fn split_halves(frames: &Tensor2D) -> Result<(Tensor2D, Tensor2D)> {
    let t = frames.rows();
    if t < 2 {
        return Err(Error::argument(format!(
            "split needs at least 2 frames, got {t}"
        )));
    }
    let mid = t / 2;
    let first = frames.slice_rows(0, mid);
    let second = frames.slice_rows(mid, t).reversed_rows();
    Ok((first, second))
}

/// Samples `s` frames. With `s <= T` the rows are distinct, chosen uniformly
/// without replacement and kept in ascending temporal order; `s == T` returns
/// the full sequence without consuming randomness. With `s > T` rows are
/// drawn with replacement and sorted ascending.
pub fn sample_frames(frames: &Tensor2D, s: usize, rng: &mut SeededRng) -> Result<Tensor2D> {
    if s < 1 {
        return Err(Error::argument("sample size must be >= 1"));
    }
    let t = frames.rows();
    let indices = sample_indices(t, s, rng);
    let mut out = Tensor2D::zeros(indices.len(), frames.cols());
    for (r, &src) in indices.iter().enumerate() {
        out.row_mut(r).copy_from_slice(frames.row(src));
    }
    Ok(out)
}

/// Index selection behind [`sample_frames`], exposed so aggregators can
/// replay a sample during the backward pass.
pub(crate) fn sample_indices(t: usize, s: usize, rng: &mut SeededRng) -> Vec<usize> {
    if s == t {
        return (0..t).collect();
    }
    let mut indices: Vec<usize>;
    if s < t {
        // Partial Fisher-Yates: draw exactly s times.
        let mut pool: Vec<usize> = (0..t).collect();
        for i in 0..s {
            let j = i + rng.below((t - i) as u64) as usize;
            pool.swap(i, j);
        }
        indices = pool[..s].to_vec();
    } else {
        indices = (0..s).map(|_| rng.below(t as u64) as usize).collect();
    }
    indices.sort_unstable();
    indices
}
