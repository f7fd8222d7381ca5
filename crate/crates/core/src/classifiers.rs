//! Video-level multi-label classification heads: a mixture-of-experts over
//! sigmoid experts with a per-class softmax gate, plus binary cross-entropy
//! and top-k ranking helpers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, softmax_backward_into, softmax_into, SeededRng, Tensor2D};

/// Mixture counts commonly used; other values work but are unusual enough
/// that front-ends warn about them.
pub const STANDARD_MIXTURES: [usize; 5] = [1, 2, 4, 8, 16];

pub fn is_standard_mixture_count(m: usize) -> bool {
    STANDARD_MIXTURES.contains(&m)
}

/// Probability clamp for the cross-entropy loss.
const BCE_EPS: f64 = 1e-7;

/// Mixture-of-experts parameters. For each class there are `mixtures` gate
/// logits (softmax-normalized) and `mixtures` expert logits (sigmoid), both
/// linear in the descriptor. Weight column `c * mixtures + m` belongs to
/// class `c`, mixture `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub classes: usize,
    pub mixtures: usize,
    pub input_dim: usize,
    /// input_dim x (classes * mixtures)
    pub gate_w: Tensor2D,
    /// 1 x (classes * mixtures)
    pub gate_b: Tensor2D,
    /// input_dim x (classes * mixtures)
    pub expert_w: Tensor2D,
    /// 1 x (classes * mixtures)
    pub expert_b: Tensor2D,
}

impl MoeParams {
    pub fn init(classes: usize, mixtures: usize, input_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        if classes == 0 || mixtures == 0 || input_dim == 0 {
            return Err(Error::argument(
                "mixture-of-experts needs classes, mixtures, and input dim >= 1",
            ));
        }
        let wide = classes * mixtures;
        let std = 1.0 / (input_dim as f64).sqrt();
        let mut gate_w = Tensor2D::zeros(input_dim, wide);
        let mut expert_w = Tensor2D::zeros(input_dim, wide);
        for v in gate_w.values_mut() {
            *v = rng.next_normal() * std;
        }
        for v in expert_w.values_mut() {
            *v = rng.next_normal() * std;
        }
        Ok(MoeParams {
            classes,
            mixtures,
            input_dim,
            gate_w,
            gate_b: Tensor2D::zeros(1, wide),
            expert_w,
            expert_b: Tensor2D::zeros(1, wide),
        })
    }

    pub fn zeros_like(&self) -> Self {
        MoeParams {
            classes: self.classes,
            mixtures: self.mixtures,
            input_dim: self.input_dim,
            gate_w: self.gate_w.zeros_like(),
            gate_b: self.gate_b.zeros_like(),
            expert_w: self.expert_w.zeros_like(),
            expert_b: self.expert_b.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor2D)> {
        vec![
            ("gate_w".into(), &self.gate_w),
            ("gate_b".into(), &self.gate_b),
            ("expert_w".into(), &self.expert_w),
            ("expert_b".into(), &self.expert_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor2D)> {
        vec![
            ("gate_w".into(), &mut self.gate_w),
            ("gate_b".into(), &mut self.gate_b),
            ("expert_w".into(), &mut self.expert_w),
            ("expert_b".into(), &mut self.expert_b),
        ]
    }
}

/// Activations cached by [`moe_forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MoeCache {
    /// classes x mixtures softmaxed gates
    gates: Tensor2D,
    /// classes x mixtures sigmoided experts
    experts: Tensor2D,
}

/// Per-class probability `p_c = Σ_m softmax(gate logits)_m · σ(expert logit_m)`.
pub fn moe_forward(params: &MoeParams, descriptor: &[f64]) -> Result<Vec<f64>> {
    Ok(moe_forward_cached(params, descriptor)?.0)
}

pub fn moe_forward_cached(params: &MoeParams, descriptor: &[f64]) -> Result<(Vec<f64>, MoeCache)> {
    if descriptor.len() != params.input_dim {
        return Err(Error::argument(format!(
            "descriptor length {} does not match head input dim {}",
            descriptor.len(),
            params.input_dim
        )));
    }
    let m = params.mixtures;
    let gate_logits = affine(&params.gate_w, &params.gate_b, descriptor);
    let expert_logits = affine(&params.expert_w, &params.expert_b, descriptor);

    let mut gates = Tensor2D::zeros(params.classes, m);
    let mut experts = Tensor2D::zeros(params.classes, m);
    let mut probs = vec![0.0; params.classes];
    for c in 0..params.classes {
        let span = c * m..(c + 1) * m;
        softmax_into(&gate_logits[span.clone()], gates.row_mut(c));
        for (e, &logit) in experts.row_mut(c).iter_mut().zip(&expert_logits[span]) {
            *e = sigmoid(logit);
        }
        probs[c] = gates
            .row(c)
            .iter()
            .zip(experts.row(c))
            .map(|(g, e)| g * e)
            .sum();
    }
    Ok((probs, MoeCache { gates, experts }))
}

/// Backward pass: gradients of a scalar loss with respect to parameters and
/// the descriptor, given `d_probs = dL/dp`.
pub fn moe_backward(
    params: &MoeParams,
    descriptor: &[f64],
    cache: &MoeCache,
    d_probs: &[f64],
    grads: &mut MoeParams,
) -> Vec<f64> {
    let m = params.mixtures;
    let mut d_descriptor = vec![0.0; params.input_dim];
    let mut d_gate_logits = vec![0.0; m];
    for c in 0..params.classes {
        let dp = d_probs[c];
        if dp == 0.0 {
            continue;
        }
        let gates = cache.gates.row(c);
        let experts = cache.experts.row(c);

        // Gate path through the softmax.
        let d_gates: Vec<f64> = experts.iter().map(|e| dp * e).collect();
        softmax_backward_into(gates, &d_gates, &mut d_gate_logits);

        for mix in 0..m {
            let col = c * m + mix;

            let dgl = d_gate_logits[mix];
            grads.gate_b.values_mut()[col] += dgl;
            // Expert path through the sigmoid.
            let e = experts[mix];
            let del = dp * gates[mix] * e * (1.0 - e);
            grads.expert_b.values_mut()[col] += del;

            for d in 0..params.input_dim {
                let x = descriptor[d];
                grads.gate_w.values_mut()[d * params.classes * m + col] += dgl * x;
                grads.expert_w.values_mut()[d * params.classes * m + col] += del * x;
                d_descriptor[d] += dgl * params.gate_w.get(d, col) + del * params.expert_w.get(d, col);
            }
        }
    }
    d_descriptor
}

fn affine(w: &Tensor2D, b: &Tensor2D, x: &[f64]) -> Vec<f64> {
    // w is input_dim x wide; logits = wᵀx + b.
    let mut out = b.row(0).to_vec();
    for (d, &xd) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(w.row(d)) {
            *o += wv * xd;
        }
    }
    out
}

/// Mean binary cross-entropy over classes, with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`. `labels` lists the positive class indices.
pub fn bce_loss(probs: &[f64], labels: &[usize]) -> f64 {
    let mut is_positive = vec![false; probs.len()];
    for &l in labels {
        is_positive[l] = true;
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(&is_positive) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    total / probs.len() as f64
}

/// Gradient of [`bce_loss`] with respect to the probabilities. Zero where the
/// clamp is active.
pub fn bce_grad(probs: &[f64], labels: &[usize]) -> Vec<f64> {
    let mut is_positive = vec![false; probs.len()];
    for &l in labels {
        is_positive[l] = true;
    }
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(&is_positive)
        .map(|(&p, &y)| {
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                0.0
            } else if y {
                -1.0 / (p * n)
            } else {
                1.0 / ((1.0 - p) * n)
            }
        })
        .collect()
}

/// The k highest-probability labels, descending; ties broken by ascending
/// label index.
pub fn predict_topk(probs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

/// Per-video scored label lists; the unit of fusion and evaluation.
///
/// Entries are kept in canonical order (confidence descending, label index
/// ascending on ties) and video ids are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    videos: BTreeMap<String, Vec<(usize, f64)>>,
}

impl PredictionSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one video's scored labels. Labels must be distinct and
    /// confidences finite in [0, 1]; a duplicate video id is a data error.
    pub fn insert(&mut self, id: impl Into<String>, mut scored: Vec<(usize, f64)>) -> Result<()> {
        let id = id.into();
        if self.videos.contains_key(&id) {
            return Err(Error::data(format!("duplicate video id {id:?}")));
        }
        if scored.is_empty() {
            return Err(Error::data(format!("video {id:?} has no scored labels")));
        }
        for &(label, conf) in &scored {
            if !conf.is_finite() || !(0.0..=1.0).contains(&conf) {
                return Err(Error::data(format!(
                    "video {id:?} label {label} has confidence {conf} outside [0, 1]"
                )));
            }
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        if scored.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::data(format!("video {id:?} repeats a label")));
        }
        self.videos.insert(id, scored);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[(usize, f64)]> {
        self.videos.get(id).map(|v| v.as_slice())
    }

    /// Videos in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(usize, f64)])> {
        self.videos.iter().map(|(id, v)| (id.as_str(), v.as_slice()))
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.videos.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seeded_head(classes: usize, mixtures: usize, dim: usize, seed: u64) -> MoeParams {
        MoeParams::init(classes, mixtures, dim, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn single_mixture_zero_params_gives_half() {
        let mut head = seeded_head(3, 1, 4, 0);
        for (_, t) in head.tensors_mut() {
            t.scale(0.0);
        }
        let probs = moe_forward(&head, &[0.3, -0.2, 1.0, 0.5]).unwrap();
        assert_eq!(probs, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn identical_experts_ignore_gates() {
        let mut head = seeded_head(2, 4, 3, 1);
        // Make all experts of each class identical by copying mixture 0's
        // column into the others.
        let m = head.mixtures;
        for c in 0..head.classes {
            for mix in 1..m {
                for d in 0..head.input_dim {
                    let v = head.expert_w.get(d, c * m);
                    head.expert_w.set(d, c * m + mix, v);
                }
                let b0 = head.expert_b.get(0, c * m);
                head.expert_b.set(0, c * m + mix, b0);
            }
        }
        let x = [0.4, -1.0, 0.7];
        let probs = moe_forward(&head, &x).unwrap();
        for c in 0..head.classes {
            let logit: f64 = (0..head.input_dim)
                .map(|d| head.expert_w.get(d, c * m) * x[d])
                .sum::<f64>()
                + head.expert_b.get(0, c * m);
            assert!((probs[c] - sigmoid(logit)).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_direct_summation() {
        let head = seeded_head(5, 4, 6, 42);
        let mut rng = SeededRng::new(7);
        let x: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
        let probs = moe_forward(&head, &x).unwrap();

        // Brute-force evaluation of the definition, one class at a time.
        let m = head.mixtures;
        for c in 0..head.classes {
            let gate_logits: Vec<f64> = (0..m)
                .map(|mix| {
                    (0..head.input_dim)
                        .map(|d| head.gate_w.get(d, c * m + mix) * x[d])
                        .sum::<f64>()
                        + head.gate_b.get(0, c * m + mix)
                })
                .collect();
            let max = gate_logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = gate_logits.iter().map(|g| (g - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut p = 0.0;
            for mix in 0..m {
                let el: f64 = (0..head.input_dim)
                    .map(|d| head.expert_w.get(d, c * m + mix) * x[d])
                    .sum::<f64>()
                    + head.expert_b.get(0, c * m + mix);
                p += (exps[mix] / z) * sigmoid(el);
            }
            assert!((probs[c] - p).abs() < 1e-12, "class {c}: {} vs {p}", probs[c]);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let head = seeded_head(2, 2, 4, 0);
        assert!(matches!(
            moe_forward(&head, &[1.0, 2.0]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn probabilities_stay_strictly_inside_unit_interval() {
        let head = seeded_head(4, 8, 5, 3);
        let mut rng = SeededRng::new(9);
        for _ in 0..50 {
            let x: Vec<f64> = (0..5).map(|_| rng.next_normal() * 3.0).collect();
            for p in moe_forward(&head, &x).unwrap() {
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }

    #[test]
    fn single_mixture_reduces_to_logistic_regression() {
        let head = seeded_head(3, 1, 4, 8);
        let mut rng = SeededRng::new(2);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.next_normal()).collect();
            let probs = moe_forward(&head, &x).unwrap();
            for c in 0..head.classes {
                let logit: f64 = (0..4)
                    .map(|d| head.expert_w.get(d, c) * x[d])
                    .sum::<f64>()
                    + head.expert_b.get(0, c);
                assert_eq!(probs[c], sigmoid(logit));
            }
        }
    }

    #[test]
    fn bce_at_matching_one_hot_is_clamp_floor() {
        let probs = vec![1.0, 0.0, 0.0];
        let loss = bce_loss(&probs, &[0]);
        assert!(loss <= -(1.0f64 - BCE_EPS).ln() + 1e-12);
        assert!(loss > 0.0);
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        for labels in [vec![], vec![0], vec![1, 3]] {
            let loss = bce_loss(&[0.5, 0.5, 0.5, 0.5], &labels);
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_gradient_signs_point_toward_indicator() {
        let mut rng = SeededRng::new(31);
        for _ in 0..100 {
            let probs: Vec<f64> = (0..5).map(|_| 0.05 + 0.9 * rng.next_f64()).collect();
            let labels = vec![1, 4];
            let grad = bce_grad(&probs, &labels);
            for (c, g) in grad.iter().enumerate() {
                if labels.contains(&c) {
                    assert!(*g < 0.0, "positive class must pull p upward");
                } else {
                    assert!(*g > 0.0, "negative class must push p downward");
                }
            }
        }
    }

    #[test]
    fn topk_basic_and_tie_rules() {
        assert_eq!(
            predict_topk(&[0.1, 0.9, 0.5], 2),
            vec![(1, 0.9), (2, 0.5)]
        );
        assert_eq!(
            predict_topk(&[0.1, 0.9, 0.5], 10),
            vec![(1, 0.9), (2, 0.5), (0, 0.1)]
        );
        // Ties at 0.5 on labels 4 and 2: label 2 first.
        let probs = [0.0, 0.0, 0.5, 0.0, 0.5];
        assert_eq!(predict_topk(&probs, 2), vec![(2, 0.5), (4, 0.5)]);
    }

    #[test]
    fn prediction_set_rejects_duplicates_and_bad_confidence() {
        let mut set = PredictionSet::new();
        set.insert("a", vec![(1, 0.5)]).unwrap();
        assert!(set.insert("a", vec![(2, 0.5)]).is_err());
        assert!(set.insert("b", vec![(1, 1.5)]).is_err());
        assert!(set.insert("c", vec![(1, 0.5), (1, 0.4)]).is_err());
    }

    #[test]
    fn prediction_set_canonicalizes_order() {
        let mut set = PredictionSet::new();
        set.insert("a", vec![(5, 0.5), (3, 0.5), (2, 0.9)]).unwrap();
        assert_eq!(set.get("a").unwrap(), &[(2, 0.9), (3, 0.5), (5, 0.5)]);
    }

    proptest! {
        #[test]
        fn moe_outputs_are_probabilities(
            seed in any::<u64>(),
            x in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let head = seeded_head(3, 4, 4, seed);
            let probs = moe_forward(&head, &x).unwrap();
            for p in probs {
                prop_assert!(p > 0.0 && p < 1.0);
            }
        }
    }
}
