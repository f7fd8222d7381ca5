//! Sequence-to-vector aggregation: recurrent stacks, temporal VLAD, and
//! mean pooling, each with a forward pass and a hand-derived backward pass.

mod netvlad;
mod rnn;

pub use netvlad::{
    netvlad_aggregate, netvlad_assign, NetVladAggregator, NetVladCache, NetVladParams,
    NetVladStreamSpec, DEFAULT_SAMPLE_CAP,
};
pub use rnn::{
    gru_step, lstm_step, CellKind, GruCell, LstmCell, RnnCache, RnnCellParams, RnnMode, RnnStack,
    RnnStackConfig,
};

use crate::error::Result;
use crate::numeric::{GradCheckable, SeededRng, Tensor2D};

/// Columnwise mean of all frames.
pub fn mean_pool(frames: &Tensor2D) -> Vec<f64> {
    let t = frames.rows();
    let mut out = vec![0.0; frames.cols()];
    for r in 0..t {
        for (o, v) in out.iter_mut().zip(frames.row(r)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= t as f64;
    }
    out
}

/// One aggregator with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregator {
    MeanPool { dim: usize },
    Rnn(RnnStack),
    NetVlad(NetVladAggregator),
}

/// Forward-pass cache consumed by [`Aggregator::backward`].
pub enum AggCache {
    MeanPool,
    Rnn(RnnCache),
    NetVlad(NetVladCache),
}

impl Aggregator {
    pub fn descriptor_dim(&self) -> usize {
        match self {
            Aggregator::MeanPool { dim } => *dim,
            Aggregator::Rnn(stack) => stack.descriptor_dim(),
            Aggregator::NetVlad(vlad) => vlad.descriptor_dim(),
        }
    }

    /// Aggregates one video's (already transformed) frames. `training` only
    /// affects recurrent dropout; `rng` feeds dropout masks and VLAD frame
    /// sampling.
    pub fn forward(
        &self,
        frames: &Tensor2D,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<(Vec<f64>, AggCache)> {
        match self {
            Aggregator::MeanPool { .. } => Ok((mean_pool(frames), AggCache::MeanPool)),
            Aggregator::Rnn(stack) => {
                let (desc, cache) = stack.aggregate(frames, training, rng)?;
                Ok((desc, AggCache::Rnn(cache)))
            }
            Aggregator::NetVlad(vlad) => {
                let (desc, cache) = vlad.forward(frames, rng)?;
                Ok((desc, AggCache::NetVlad(cache)))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` given the gradient of a
    /// scalar loss with respect to the descriptor. Mean pooling has no
    /// parameters, so there is nothing to do for it.
    pub fn backward(&self, cache: &AggCache, d_descriptor: &[f64], grads: &mut Aggregator) {
        match (self, cache, grads) {
            (Aggregator::MeanPool { .. }, AggCache::MeanPool, Aggregator::MeanPool { .. }) => {}
            (Aggregator::Rnn(stack), AggCache::Rnn(c), Aggregator::Rnn(g)) => {
                stack.backward(c, d_descriptor, g)
            }
            (Aggregator::NetVlad(vlad), AggCache::NetVlad(c), Aggregator::NetVlad(g)) => {
                vlad.backward(c, d_descriptor, g)
            }
            _ => unreachable!("aggregator / cache / grads kind mismatch"),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Aggregator::MeanPool { dim } => Aggregator::MeanPool { dim: *dim },
            Aggregator::Rnn(stack) => Aggregator::Rnn(stack.zeros_like()),
            Aggregator::NetVlad(vlad) => Aggregator::NetVlad(vlad.zeros_like()),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor2D)> {
        match self {
            Aggregator::MeanPool { .. } => Vec::new(),
            Aggregator::Rnn(stack) => stack.tensors(),
            Aggregator::NetVlad(vlad) => vlad.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor2D)> {
        match self {
            Aggregator::MeanPool { .. } => Vec::new(),
            Aggregator::Rnn(stack) => stack.tensors_mut(),
            Aggregator::NetVlad(vlad) => vlad.tensors_mut(),
        }
    }
}

/// Adapts an aggregator to [`GradCheckable`] through the linear loss
/// `probe · descriptor`. Dropout and sampling are re-seeded identically on
/// every call so the loss is a deterministic function of the parameters.
pub struct AggregatorProbe {
    pub agg: Aggregator,
    pub frames: Tensor2D,
    pub probe: Vec<f64>,
    pub training: bool,
    pub rng_seed: u64,
}

impl AggregatorProbe {
    pub fn new(agg: Aggregator, frames: Tensor2D, rng_seed: u64) -> Self {
        let dim = agg.descriptor_dim();
        let mut rng = SeededRng::new(rng_seed ^ 0xA5A5_5A5A);
        let probe = (0..dim).map(|_| rng.next_normal()).collect();
        AggregatorProbe {
            agg,
            frames,
            probe,
            training: false,
            rng_seed,
        }
    }
}

impl GradCheckable for AggregatorProbe {
    fn params(&self) -> Vec<f64> {
        flatten_tensors(&self.agg.tensors())
    }

    fn set_params(&mut self, theta: &[f64]) {
        assign_flat(self.agg.tensors_mut(), theta);
    }

    fn param_name(&self, i: usize) -> String {
        flat_param_name(&self.agg.tensors(), i)
    }

    fn loss(&self) -> Result<f64> {
        let mut rng = SeededRng::new(self.rng_seed);
        let (desc, _) = self.agg.forward(&self.frames, self.training, &mut rng)?;
        Ok(desc.iter().zip(&self.probe).map(|(d, p)| d * p).sum())
    }

    fn analytic_grad(&self) -> Result<Vec<f64>> {
        let mut rng = SeededRng::new(self.rng_seed);
        let (_, cache) = self.agg.forward(&self.frames, self.training, &mut rng)?;
        let mut grads = self.agg.zeros_like();
        self.agg.backward(&cache, &self.probe, &mut grads);
        Ok(flatten_tensors(&grads.tensors()))
    }
}

/// Flattens named tensors into one parameter vector, in list order.
pub fn flatten_tensors(tensors: &[(String, &Tensor2D)]) -> Vec<f64> {
    tensors
        .iter()
        .flat_map(|(_, t)| t.values().iter().copied())
        .collect()
}

/// Writes a flat parameter vector back into named tensors, in list order.
pub fn assign_flat(tensors: Vec<(String, &mut Tensor2D)>, theta: &[f64]) {
    let mut offset = 0;
    for (_, t) in tensors {
        let len = t.values().len();
        t.values_mut().copy_from_slice(&theta[offset..offset + len]);
        offset += len;
    }
    debug_assert_eq!(offset, theta.len());
}

/// Name of the scalar parameter at a flat index, e.g. `dir0.layer1.w_cand[7]`.
pub fn flat_param_name(tensors: &[(String, &Tensor2D)], index: usize) -> String {
    let mut offset = 0;
    for (name, t) in tensors {
        let len = t.values().len();
        if index < offset + len {
            return format!("{name}[{}]", index - offset);
        }
        offset += len;
    }
    format!("param[{index}]")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;

    fn random_frames(rows: usize, cols: usize, seed: u64) -> Tensor2D {
        let mut rng = SeededRng::new(seed);
        let mut t = Tensor2D::zeros(rows, cols);
        for v in t.values_mut() {
            *v = rng.next_normal();
        }
        t
    }

    #[test]
    fn mean_pool_single_frame_is_identity() {
        let frames = Tensor2D::from_rows(&[vec![3.0, -1.0, 2.5]]).unwrap();
        assert_eq!(mean_pool(&frames), vec![3.0, -1.0, 2.5]);
    }

    #[test]
    fn mean_pool_small_case() {
        let frames = Tensor2D::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(mean_pool(&frames), vec![1.0, 1.0]);
    }

    #[test]
    fn mean_pool_is_permutation_invariant() {
        let frames = random_frames(6, 4, 3);
        let base = mean_pool(&frames);
        let permuted = frames.reversed_rows();
        let other = mean_pool(&permuted);
        for (a, b) in base.iter().zip(&other) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_three_step_gradient_matches_finite_differences() {
        let config = RnnStackConfig {
            cell: CellKind::Gru,
            layers: vec![5],
            residual: false,
            dropout: 0.0,
            mode: RnnMode::Forward,
        };
        let stack = RnnStack::init(config, 4, &mut SeededRng::new(17)).unwrap();
        let mut probe = AggregatorProbe::new(Aggregator::Rnn(stack), random_frames(3, 4, 18), 19);
        let report = grad_check(&mut probe, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "rel {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn lstm_stack_gradient_matches_finite_differences() {
        let config = RnnStackConfig {
            cell: CellKind::Lstm,
            layers: vec![4, 4],
            residual: true,
            dropout: 0.0,
            mode: RnnMode::Forward,
        };
        let stack = RnnStack::init(config, 4, &mut SeededRng::new(23)).unwrap();
        let mut probe = AggregatorProbe::new(Aggregator::Rnn(stack), random_frames(4, 4, 24), 25);
        let report = grad_check(&mut probe, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "rel {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn bidirectional_with_dropout_gradient_matches_finite_differences() {
        let config = RnnStackConfig {
            cell: CellKind::Gru,
            layers: vec![3, 3],
            residual: false,
            dropout: 0.3,
            mode: RnnMode::Bidirectional,
        };
        let stack = RnnStack::init(config, 3, &mut SeededRng::new(29)).unwrap();
        let mut probe = AggregatorProbe::new(Aggregator::Rnn(stack), random_frames(5, 3, 30), 31);
        probe.training = true;
        let report = grad_check(&mut probe, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "rel {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn split_bidirectional_gradient_matches_finite_differences() {
        let config = RnnStackConfig {
            cell: CellKind::Lstm,
            layers: vec![4],
            residual: false,
            dropout: 0.0,
            mode: RnnMode::SplitBidirectional,
        };
        let stack = RnnStack::init(config, 3, &mut SeededRng::new(37)).unwrap();
        let mut probe = AggregatorProbe::new(Aggregator::Rnn(stack), random_frames(5, 3, 38), 39);
        let report = grad_check(&mut probe, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "rel {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn netvlad_gradient_matches_finite_differences() {
        let visual = NetVladStreamSpec {
            clusters: 2,
            sample_size: Some(3),
            intra_norm: false,
        };
        let audio = NetVladStreamSpec {
            clusters: 2,
            sample_size: None,
            intra_norm: false,
        };
        let vlad =
            NetVladAggregator::init(&visual, &audio, 2, 2, &mut SeededRng::new(41)).unwrap();
        let mut probe =
            AggregatorProbe::new(Aggregator::NetVlad(vlad), random_frames(5, 4, 42), 43);
        let report = grad_check(&mut probe, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "rel {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn netvlad_intra_norm_gradient_matches_finite_differences() {
        let visual = NetVladStreamSpec {
            clusters: 3,
            sample_size: None,
            intra_norm: true,
        };
        let vlad = NetVladAggregator::init(&visual, &visual, 3, 0, &mut SeededRng::new(47)).unwrap();
        let mut probe =
            AggregatorProbe::new(Aggregator::NetVlad(vlad), random_frames(4, 3, 48), 49);
        let report = grad_check(&mut probe, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "rel {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }
}
