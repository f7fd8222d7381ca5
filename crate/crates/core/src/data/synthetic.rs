use crate::error::{Error, Result};
use crate::numeric::{SeededRng, Tensor2D};

use super::{quantize_f32, DatasetMeta, FrameSequence};

/// Parameters of the synthetic dataset generator.
///
/// Each class owns a latent prototype trajectory: a fixed random base vector
/// plus a class-specific linear drift over time, so temporal-difference
/// transforms carry class signal. A video's frames are the sum of its
/// classes' trajectories plus `noise` times standard Gaussian noise. Labels
/// are one primary class plus each other class independently with
/// `multilabel_rate`.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub videos: usize,
    /// Frames per video (T).
    pub frames: usize,
    /// Feature dimension (D).
    pub dim: usize,
    /// Columns treated as the audio stream; `None` picks dim/4
    /// (0 when dim < 8). visual_dim is the remainder.
    pub audio_dim: Option<usize>,
    pub noise: f64,
    pub multilabel_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::argument("synthetic data needs classes >= 2"));
        }
        if self.dim < 2 {
            return Err(Error::argument("synthetic data needs dim >= 2"));
        }
        if self.frames < 4 {
            return Err(Error::argument("synthetic data needs frames >= 4"));
        }
        if self.noise < 0.0 {
            return Err(Error::argument("noise must be >= 0"));
        }
        if self.videos == 0 {
            return Err(Error::argument("synthetic data needs videos >= 1"));
        }
        if !(0.0..=1.0).contains(&self.multilabel_rate) {
            return Err(Error::argument("multilabel rate must be in [0, 1]"));
        }
        if let Some(a) = self.audio_dim {
            if a >= self.dim {
                return Err(Error::argument("audio_dim must be smaller than dim"));
            }
        }
        Ok(())
    }

    fn resolved_audio_dim(&self) -> usize {
        match self.audio_dim {
            Some(a) => a,
            None if self.dim >= 8 => self.dim / 4,
            None => 0,
        }
    }
}

/// Deterministically generates a labeled dataset; a pure function of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(DatasetMeta, Vec<FrameSequence>)> {
    spec.validate()?;
    let audio_dim = spec.resolved_audio_dim();
    let meta = DatasetMeta {
        dim: spec.dim,
        visual_dim: spec.dim - audio_dim,
        audio_dim,
        vocab: spec.classes,
        samples: spec.videos,
    };

    let mut rng = SeededRng::new(spec.seed);
    let mut proto_rng = rng.split();
    let mut label_rng = rng.split();
    let mut noise_rng = rng.split();

    // Per-class base vector and per-step drift. The drift is scaled by the
    // sequence length so the total excursion stays O(1).
    let drift_scale = 1.0 / spec.frames as f64;
    let bases: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| proto_rng.next_normal()).collect())
        .collect();
    let drifts: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| proto_rng.next_normal() * drift_scale)
                .collect()
        })
        .collect();

    let id_width = (spec.videos as f64).log10().ceil().max(4.0) as usize;
    let mut samples = Vec::with_capacity(spec.videos);
    for v in 0..spec.videos {
        let primary = label_rng.below(spec.classes as u64) as usize;
        let mut labels = vec![primary];
        for c in 0..spec.classes {
            if c != primary && label_rng.next_f64() < spec.multilabel_rate {
                labels.push(c);
            }
        }
        labels.sort_unstable();

        let mut frames = Tensor2D::zeros(spec.frames, spec.dim);
        for t in 0..spec.frames {
            let row = frames.row_mut(t);
            for &c in &labels {
                let base = &bases[c];
                let drift = &drifts[c];
                for (d, val) in row.iter_mut().enumerate() {
                    *val += base[d] + t as f64 * drift[d];
                }
            }
            for val in row.iter_mut() {
                if spec.noise > 0.0 {
                    *val += spec.noise * noise_rng.next_normal();
                }
                *val = quantize_f32(*val);
            }
        }
        samples.push(FrameSequence {
            id: format!("v{v:0id_width$}"),
            frames,
            labels,
        });
    }
    Ok((meta, samples))
}
