//! Trainable VLAD pooling over the temporal dimension.
//!
//! Frames are sampled to S rows, soft-assigned to K clusters by a width-1
//! convolution followed by a row softmax, and aggregated as per-cluster
//! residual sums `v_k = Σ_i a_ik (r_i - u_k)`. The descriptor is the
//! concatenation v_1..v_K, length K·D.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax_backward_into, softmax_into, SeededRng, Tensor2D};
use crate::transforms::sample_frames;

/// Sampling cap used when no explicit sample size is configured.
pub const DEFAULT_SAMPLE_CAP: usize = 300;

const NORM_GUARD: f64 = 1e-12;

/// Parameters of one VLAD stream.
#[derive(Debug, Clone, PartialEq)]
pub struct NetVladParams {
    /// Cluster count K.
    pub clusters: usize,
    /// Feature dim D of this stream.
    pub dim: usize,
    /// Cluster means, K x D.
    pub means: Tensor2D,
    /// Assignment kernel (width-1 convolution), D x K.
    pub kernel: Tensor2D,
    /// Assignment bias, 1 x K.
    pub bias: Tensor2D,
    /// Frames sampled per video; `None` means min(T, 300). An explicit value
    /// larger than T samples with replacement.
    pub sample_size: Option<usize>,
    /// L2-normalize each v_k block of the descriptor.
    pub intra_norm: bool,
}

/// Config for building a stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetVladStreamSpec {
    pub clusters: usize,
    #[serde(default)]
    pub sample_size: Option<usize>,
    #[serde(default)]
    pub intra_norm: bool,
}

impl NetVladParams {
    pub fn init(spec: &NetVladStreamSpec, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if spec.clusters == 0 {
            return Err(Error::config("vlad cluster count must be >= 1"));
        }
        if dim == 0 {
            return Err(Error::config("vlad stream dim must be >= 1"));
        }
        if spec.sample_size == Some(0) {
            return Err(Error::config("vlad sample size must be >= 1"));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let mut means = Tensor2D::zeros(spec.clusters, dim);
        for v in means.values_mut() {
            *v = rng.next_normal() * std;
        }
        let mut kernel = Tensor2D::zeros(dim, spec.clusters);
        for v in kernel.values_mut() {
            *v = rng.next_normal() * std;
        }
        Ok(NetVladParams {
            clusters: spec.clusters,
            dim,
            means,
            kernel,
            bias: Tensor2D::zeros(1, spec.clusters),
            sample_size: spec.sample_size,
            intra_norm: spec.intra_norm,
        })
    }

    pub fn zeros_like(&self) -> Self {
        NetVladParams {
            clusters: self.clusters,
            dim: self.dim,
            means: self.means.zeros_like(),
            kernel: self.kernel.zeros_like(),
            bias: self.bias.zeros_like(),
            sample_size: self.sample_size,
            intra_norm: self.intra_norm,
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor2D)> {
        vec![
            ("means", &self.means),
            ("kernel", &self.kernel),
            ("bias", &self.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor2D)> {
        vec![
            ("means", &mut self.means),
            ("kernel", &mut self.kernel),
            ("bias", &mut self.bias),
        ]
    }

    fn effective_sample(&self, t: usize) -> usize {
        self.sample_size.unwrap_or_else(|| t.min(DEFAULT_SAMPLE_CAP))
    }

    pub fn descriptor_dim(&self) -> usize {
        self.clusters * self.dim
    }
}

/// Soft cluster assignments: `A = softmax_rows(R · kernel + bias)`, S x K.
pub fn netvlad_assign(r: &Tensor2D, params: &NetVladParams) -> Result<Tensor2D> {
    if r.cols() != params.dim {
        return Err(Error::argument(format!(
            "assignment input dim {} does not match stream dim {}",
            r.cols(),
            params.dim
        )));
    }
    let s = r.rows();
    let k = params.clusters;
    let mut a = Tensor2D::zeros(s, k);
    let mut raw = vec![0.0; k];
    for i in 0..s {
        raw.copy_from_slice(params.bias.row(0));
        let frame = r.row(i);
        for (d, &x) in frame.iter().enumerate() {
            for (acc, w) in raw.iter_mut().zip(params.kernel.row(d)) {
                *acc += x * w;
            }
        }
        softmax_into(&raw, a.row_mut(i));
    }
    Ok(a)
}

/// Aggregated descriptor `v_k = Σ_i a_ik (r_i - u_k)`, concatenated over k.
pub fn netvlad_aggregate(r: &Tensor2D, a: &Tensor2D, u: &Tensor2D) -> Result<Vec<f64>> {
    let (s, d) = r.shape();
    let k = u.rows();
    if a.shape() != (s, k) || u.cols() != d {
        return Err(Error::argument(format!(
            "inconsistent vlad shapes: R {:?}, A {:?}, U {:?}",
            r.shape(),
            a.shape(),
            u.shape()
        )));
    }
    let mut out = vec![0.0; k * d];
    for cluster in 0..k {
        let block = &mut out[cluster * d..(cluster + 1) * d];
        let mean = u.row(cluster);
        let mut weight_sum = 0.0;
        for i in 0..s {
            let w = a.get(i, cluster);
            weight_sum += w;
            for (b, x) in block.iter_mut().zip(r.row(i)) {
                *b += w * x;
            }
        }
        for (b, m) in block.iter_mut().zip(mean) {
            *b -= weight_sum * m;
        }
    }
    Ok(out)
}

/// Cached intermediates of one stream pass.
pub struct StreamCache {
    sampled: Tensor2D,
    assignments: Tensor2D,
    /// Pre-normalization descriptor, kept only when intra_norm is on.
    raw_descriptor: Option<Vec<f64>>,
}

fn stream_forward(params: &NetVladParams, frames: &Tensor2D, rng: &mut SeededRng) -> Result<(Vec<f64>, StreamCache)> {
    let s = params.effective_sample(frames.rows());
    let sampled = sample_frames(frames, s, rng)?;
    let assignments = netvlad_assign(&sampled, params)?;
    let mut descriptor = netvlad_aggregate(&sampled, &assignments, &params.means)?;
    let raw_descriptor = if params.intra_norm {
        let raw = descriptor.clone();
        for block in descriptor.chunks_mut(params.dim) {
            let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > NORM_GUARD {
                for v in block.iter_mut() {
                    *v /= norm;
                }
            }
        }
        Some(raw)
    } else {
        None
    };
    Ok((
        descriptor,
        StreamCache {
            sampled,
            assignments,
            raw_descriptor,
        },
    ))
}

fn stream_backward(
    params: &NetVladParams,
    cache: &StreamCache,
    d_out: &[f64],
    grads: &mut NetVladParams,
) {
    let d = params.dim;
    let k = params.clusters;
    let s = cache.sampled.rows();

    // Undo the intra-normalization if it was applied.
    let mut dv = d_out.to_vec();
    if let Some(raw) = &cache.raw_descriptor {
        for (cluster, block) in dv.chunks_mut(d).enumerate() {
            let raw_block = &raw[cluster * d..(cluster + 1) * d];
            let norm = raw_block.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > NORM_GUARD {
                let unit: Vec<f64> = raw_block.iter().map(|v| v / norm).collect();
                let dot: f64 = unit.iter().zip(block.iter()).map(|(u, g)| u * g).sum();
                for (g, u) in block.iter_mut().zip(&unit) {
                    *g = (*g - dot * u) / norm;
                }
            }
        }
    }

    // Means and assignment gradients.
    let mut d_assign = Tensor2D::zeros(s, k);
    for cluster in 0..k {
        let dv_k = &dv[cluster * d..(cluster + 1) * d];
        let mean = params.means.row(cluster);
        let mut weight_sum = 0.0;
        for i in 0..s {
            let a = cache.assignments.get(i, cluster);
            weight_sum += a;
            let mut dot = 0.0;
            for ((x, m), g) in cache.sampled.row(i).iter().zip(mean).zip(dv_k) {
                dot += (x - m) * g;
            }
            d_assign.set(i, cluster, dot);
        }
        for (gm, g) in grads.means.row_mut(cluster).iter_mut().zip(dv_k) {
            *gm -= weight_sum * g;
        }
    }

    // Back through the row softmax into kernel and bias.
    let mut draw = vec![0.0; k];
    for i in 0..s {
        softmax_backward_into(cache.assignments.row(i), d_assign.row(i), &mut draw);
        grads.kernel.add_outer(cache.sampled.row(i), &draw, 1.0);
        for (gb, dr) in grads.bias.row_mut(0).iter_mut().zip(&draw) {
            *gb += dr;
        }
    }
}

/// Dual-stream temporal VLAD: visual and audio columns are pooled by
/// separate VLAD layers and the descriptors concatenated (visual first).
#[derive(Debug, Clone, PartialEq)]
pub struct NetVladAggregator {
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub visual: NetVladParams,
    /// Absent when the dataset has no audio columns.
    pub audio: Option<NetVladParams>,
}

pub struct NetVladCache {
    visual: StreamCache,
    audio: Option<StreamCache>,
}

impl NetVladAggregator {
    pub fn init(
        visual_spec: &NetVladStreamSpec,
        audio_spec: &NetVladStreamSpec,
        visual_dim: usize,
        audio_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let visual = NetVladParams::init(visual_spec, visual_dim, rng)?;
        let audio = if audio_dim > 0 {
            Some(NetVladParams::init(audio_spec, audio_dim, rng)?)
        } else {
            None
        };
        Ok(NetVladAggregator {
            visual_dim,
            audio_dim,
            visual,
            audio,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.visual.descriptor_dim()
            + self.audio.as_ref().map_or(0, |a| a.descriptor_dim())
    }

    pub fn zeros_like(&self) -> Self {
        NetVladAggregator {
            visual_dim: self.visual_dim,
            audio_dim: self.audio_dim,
            visual: self.visual.zeros_like(),
            audio: self.audio.as_ref().map(|a| a.zeros_like()),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor2D)> {
        let mut out: Vec<(String, &Tensor2D)> = self
            .visual
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("visual.{n}"), t))
            .collect();
        if let Some(audio) = &self.audio {
            out.extend(
                audio
                    .tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("audio.{n}"), t)),
            );
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor2D)> {
        let mut out: Vec<(String, &mut Tensor2D)> = self
            .visual
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("visual.{n}"), t))
            .collect();
        if let Some(audio) = &mut self.audio {
            out.extend(
                audio
                    .tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("audio.{n}"), t)),
            );
        }
        out
    }

    /// Samples, assigns, and aggregates each stream; concatenates visual then
    /// audio descriptors. Sampling draws from `rng` (visual stream first).
    pub fn forward(&self, frames: &Tensor2D, rng: &mut SeededRng) -> Result<(Vec<f64>, NetVladCache)> {
        if frames.cols() != self.visual_dim + self.audio_dim {
            return Err(Error::argument(format!(
                "frame dim {} does not match visual {} + audio {}",
                frames.cols(),
                self.visual_dim,
                self.audio_dim
            )));
        }
        let visual_frames = if self.audio_dim == 0 {
            frames.clone()
        } else {
            frames.slice_cols(0, self.visual_dim)
        };
        let (mut descriptor, visual_cache) = stream_forward(&self.visual, &visual_frames, rng)?;
        let audio_cache = match &self.audio {
            Some(audio) => {
                let audio_frames = frames.slice_cols(self.visual_dim, frames.cols());
                let (audio_desc, cache) = stream_forward(audio, &audio_frames, rng)?;
                descriptor.extend(audio_desc);
                Some(cache)
            }
            None => None,
        };
        Ok((
            descriptor,
            NetVladCache {
                visual: visual_cache,
                audio: audio_cache,
            },
        ))
    }

    pub fn backward(&self, cache: &NetVladCache, d_descriptor: &[f64], grads: &mut NetVladAggregator) {
        let split = self.visual.descriptor_dim();
        stream_backward(&self.visual, &cache.visual, &d_descriptor[..split], &mut grads.visual);
        if let (Some(audio), Some(audio_cache), Some(audio_grads)) =
            (&self.audio, &cache.audio, grads.audio.as_mut())
        {
            stream_backward(audio, audio_cache, &d_descriptor[split..], audio_grads);
        }
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(clusters: usize) -> NetVladStreamSpec {
        NetVladStreamSpec {
            clusters,
            sample_size: None,
            intra_norm: false,
        }
    }

    fn random_frames(rows: usize, cols: usize, seed: u64) -> Tensor2D {
        let mut rng = SeededRng::new(seed);
        let mut t = Tensor2D::zeros(rows, cols);
        for v in t.values_mut() {
            *v = rng.next_normal();
        }
        t
    }

    #[test]
    fn single_cluster_assignments_are_exactly_one() {
        let params = NetVladParams::init(&spec(1), 3, &mut SeededRng::new(1)).unwrap();
        let r = random_frames(4, 3, 2);
        let a = netvlad_assign(&r, &params).unwrap();
        for i in 0..4 {
            assert_eq!(a.get(i, 0), 1.0);
        }
    }

    #[test]
    fn zero_kernel_gives_uniform_assignments() {
        let mut params = NetVladParams::init(&spec(3), 2, &mut SeededRng::new(1)).unwrap();
        params.kernel.scale(0.0);
        params.bias.scale(0.0);
        let r = random_frames(5, 2, 3);
        let a = netvlad_assign(&r, &params).unwrap();
        for i in 0..5 {
            for k in 0..3 {
                assert!((a.get(i, k) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn assignment_rows_sum_to_one() {
        let params = NetVladParams::init(&spec(4), 6, &mut SeededRng::new(7)).unwrap();
        let r = random_frames(10, 6, 8);
        let a = netvlad_assign(&r, &params).unwrap();
        for i in 0..10 {
            let sum: f64 = a.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_dim_mismatch_is_argument_error() {
        let params = NetVladParams::init(&spec(2), 3, &mut SeededRng::new(0)).unwrap();
        let r = random_frames(2, 4, 0);
        assert!(matches!(netvlad_assign(&r, &params), Err(Error::Argument(_))));
    }

    #[test]
    fn residuals_cancel_in_tiny_case() {
        // S=2, D=1, K=1, r = {1, 3}, u = {2}, a = {1, 1}.
        let r = Tensor2D::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let a = Tensor2D::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let u = Tensor2D::from_rows(&[vec![2.0]]).unwrap();
        let v = netvlad_aggregate(&r, &a, &u).unwrap();
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn frames_equal_to_the_mean_give_zero_vector() {
        let r = Tensor2D::from_rows(&[vec![0.5, -1.0], vec![0.5, -1.0], vec![0.5, -1.0]]).unwrap();
        let a = Tensor2D::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let u = Tensor2D::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let v = netvlad_aggregate(&r, &a, &u).unwrap();
        assert!(v.iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn aggregate_matches_double_loop_oracle() {
        let params = NetVladParams::init(&spec(2), 3, &mut SeededRng::new(5)).unwrap();
        let r = random_frames(4, 3, 6);
        let a = netvlad_assign(&r, &params).unwrap();
        let v = netvlad_aggregate(&r, &a, &params.means).unwrap();
        assert_eq!(v.len(), 2 * 3);
        for k in 0..2 {
            for d in 0..3 {
                let mut expect = 0.0;
                for i in 0..4 {
                    expect += a.get(i, k) * (r.get(i, d) - params.means.get(k, d));
                }
                assert!((v[k * 3 + d] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn audio_dim_zero_is_visual_only() {
        let agg =
            NetVladAggregator::init(&spec(2), &spec(2), 4, 0, &mut SeededRng::new(3)).unwrap();
        assert!(agg.audio.is_none());
        let frames = random_frames(5, 4, 9);
        let (desc, _) = agg.forward(&frames, &mut SeededRng::new(0)).unwrap();
        assert_eq!(desc.len(), 8);
        let (visual_only, _) = stream_forward(&agg.visual, &frames, &mut SeededRng::new(0)).unwrap();
        assert_eq!(desc, visual_only);
    }

    #[test]
    fn dual_stream_descriptor_length() {
        let visual = NetVladStreamSpec {
            clusters: 8,
            sample_size: None,
            intra_norm: false,
        };
        let audio = NetVladStreamSpec {
            clusters: 2,
            sample_size: None,
            intra_norm: false,
        };
        let agg = NetVladAggregator::init(&visual, &audio, 16, 4, &mut SeededRng::new(3)).unwrap();
        assert_eq!(agg.descriptor_dim(), 136);
        let frames = random_frames(6, 20, 10);
        let (desc, _) = agg.forward(&frames, &mut SeededRng::new(0)).unwrap();
        assert_eq!(desc.len(), 136);
    }

    #[test]
    fn forward_is_deterministic_for_fixed_seed() {
        let mut visual = spec(3);
        visual.sample_size = Some(4);
        let agg = NetVladAggregator::init(&visual, &spec(2), 5, 2, &mut SeededRng::new(3)).unwrap();
        let frames = random_frames(9, 7, 11);
        let (a, _) = agg.forward(&frames, &mut SeededRng::new(42)).unwrap();
        let (b, _) = agg.forward(&frames, &mut SeededRng::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn intra_norm_blocks_have_unit_length() {
        let mut s = spec(3);
        s.intra_norm = true;
        let params = NetVladParams::init(&s, 4, &mut SeededRng::new(13)).unwrap();
        let frames = random_frames(6, 4, 14);
        let (desc, _) = stream_forward(&params, &frames, &mut SeededRng::new(0)).unwrap();
        for block in desc.chunks(4) {
            let norm: f64 = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}
