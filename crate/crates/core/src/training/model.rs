use serde::{Deserialize, Serialize};

use crate::aggregators::{
    Aggregator, CellKind, NetVladAggregator, NetVladStreamSpec, RnnMode, RnnStack, RnnStackConfig,
};
use crate::classifiers::{
    bce_grad, bce_loss, moe_backward, moe_forward, moe_forward_cached, predict_topk, MoeParams,
};
use crate::data::{DatasetMeta, FrameSequence};
use crate::error::{Error, Result};
use crate::numeric::{GradCheckable, SeededRng, Tensor2D};
use crate::transforms::{apply_all, TransformSpec};

use super::label_filter::LabelFilter;

/// Dataset dimensions a model is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataDims {
    pub dim: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub vocab: usize,
}

impl From<&DatasetMeta> for DataDims {
    fn from(meta: &DatasetMeta) -> Self {
        DataDims {
            dim: meta.dim,
            visual_dim: meta.visual_dim,
            audio_dim: meta.audio_dim,
            vocab: meta.vocab,
        }
    }
}

/// Aggregator choice plus its shape options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    /// Frame mean pooling straight into the classifier.
    MoeMeanpool,
    Gru {
        layers: Vec<usize>,
        #[serde(default)]
        residual: bool,
        #[serde(default)]
        dropout: f64,
        #[serde(default = "forward_mode")]
        mode: RnnMode,
    },
    Lstm {
        layers: Vec<usize>,
        #[serde(default)]
        residual: bool,
        #[serde(default)]
        dropout: f64,
        #[serde(default = "forward_mode")]
        mode: RnnMode,
    },
    NetVlad {
        clusters_visual: usize,
        #[serde(default = "default_audio_clusters")]
        clusters_audio: usize,
        #[serde(default)]
        sample_size: Option<usize>,
        #[serde(default)]
        intra_norm: bool,
    },
}

fn forward_mode() -> RnnMode {
    RnnMode::Forward
}

fn default_audio_clusters() -> usize {
    2
}

fn default_mixtures() -> usize {
    2
}

/// Everything needed to rebuild a model's shape (not its weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: ModelKind,
    #[serde(default = "default_mixtures")]
    pub mixtures: usize,
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
    /// Reserved knob for an extra no-prediction gate; not implemented, must
    /// stay false.
    #[serde(default)]
    pub null_expert: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.null_expert {
            return Err(Error::config(
                "null_expert is reserved and not supported; set it to false",
            ));
        }
        if self.mixtures == 0 {
            return Err(Error::config("mixtures must be >= 1"));
        }
        for t in &self.transforms {
            t.validate()?;
        }
        Ok(())
    }
}

/// A trainable pipeline: transforms, an aggregator, and an MoE head over the
/// (possibly filtered) label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub dims: DataDims,
    pub aggregator: Aggregator,
    pub head: MoeParams,
    pub filter: Option<LabelFilter>,
}

/// Parameter-shaped gradient (or moment) storage.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub aggregator: Aggregator,
    pub head: MoeParams,
}

impl ModelGrads {
    pub fn tensors(&self) -> Vec<(String, &Tensor2D)> {
        collect_tensors(&self.aggregator, &self.head)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor2D)> {
        collect_tensors_mut(&mut self.aggregator, &mut self.head)
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.scale(factor);
        }
    }
}

fn collect_tensors<'a>(agg: &'a Aggregator, head: &'a MoeParams) -> Vec<(String, &'a Tensor2D)> {
    let mut out: Vec<(String, &Tensor2D)> = agg
        .tensors()
        .into_iter()
        .map(|(n, t)| (format!("agg.{n}"), t))
        .collect();
    out.extend(head.tensors().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
    out
}

fn collect_tensors_mut<'a>(
    agg: &'a mut Aggregator,
    head: &'a mut MoeParams,
) -> Vec<(String, &'a mut Tensor2D)> {
    let mut out: Vec<(String, &mut Tensor2D)> = agg
        .tensors_mut()
        .into_iter()
        .map(|(n, t)| (format!("agg.{n}"), t))
        .collect();
    out.extend(
        head.tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("head.{n}"), t)),
    );
    out
}

impl Model {
    /// Builds and initializes a model. All randomness comes from `rng`, so
    /// equal seeds give identical parameters.
    pub fn init(
        spec: &ModelSpec,
        dims: DataDims,
        filter: Option<LabelFilter>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        spec.validate()?;
        if dims.visual_dim + dims.audio_dim != dims.dim {
            return Err(Error::config("visual_dim + audio_dim must equal dim"));
        }
        let aggregator = match &spec.model {
            ModelKind::MoeMeanpool => Aggregator::MeanPool { dim: dims.dim },
            ModelKind::Gru {
                layers,
                residual,
                dropout,
                mode,
            } => Aggregator::Rnn(RnnStack::init(
                RnnStackConfig {
                    cell: CellKind::Gru,
                    layers: layers.clone(),
                    residual: *residual,
                    dropout: *dropout,
                    mode: *mode,
                },
                dims.dim,
                rng,
            )?),
            ModelKind::Lstm {
                layers,
                residual,
                dropout,
                mode,
            } => Aggregator::Rnn(RnnStack::init(
                RnnStackConfig {
                    cell: CellKind::Lstm,
                    layers: layers.clone(),
                    residual: *residual,
                    dropout: *dropout,
                    mode: *mode,
                },
                dims.dim,
                rng,
            )?),
            ModelKind::NetVlad {
                clusters_visual,
                clusters_audio,
                sample_size,
                intra_norm,
            } => {
                let visual = NetVladStreamSpec {
                    clusters: *clusters_visual,
                    sample_size: *sample_size,
                    intra_norm: *intra_norm,
                };
                let audio = NetVladStreamSpec {
                    clusters: *clusters_audio,
                    sample_size: *sample_size,
                    intra_norm: *intra_norm,
                };
                Aggregator::NetVlad(NetVladAggregator::init(
                    &visual,
                    &audio,
                    dims.visual_dim,
                    dims.audio_dim,
                    rng,
                )?)
            }
        };
        if let Some(f) = &filter {
            if f.kept().last().is_some_and(|&l| l >= dims.vocab) {
                return Err(Error::config("label filter keeps an out-of-vocab label"));
            }
        }
        let classes = filter.as_ref().map_or(dims.vocab, |f| f.keep_count());
        let head = MoeParams::init(classes, spec.mixtures, aggregator.descriptor_dim(), rng)?;
        Ok(Model {
            spec: spec.clone(),
            dims,
            aggregator,
            head,
            filter,
        })
    }

    pub fn descriptor_dim(&self) -> usize {
        self.aggregator.descriptor_dim()
    }

    /// True when the aggregator is a recurrent stack (these get gradient
    /// clipping during training).
    pub fn is_recurrent(&self) -> bool {
        matches!(self.aggregator, Aggregator::Rnn(_))
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            aggregator: self.aggregator.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor2D)> {
        collect_tensors(&self.aggregator, &self.head)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor2D)> {
        collect_tensors_mut(&mut self.aggregator, &mut self.head)
    }

    /// Labels of one sample mapped into the head's class space (identity
    /// without a filter; discarded labels drop out).
    fn head_targets(&self, labels: &[usize]) -> Vec<usize> {
        match &self.filter {
            None => labels.to_vec(),
            Some(f) => labels.iter().filter_map(|&l| f.head_index(l)).collect(),
        }
    }

    /// Per-class probabilities in the head's class space.
    pub fn probabilities(&self, frames: &Tensor2D, rng: &mut SeededRng) -> Result<Vec<f64>> {
        let transformed = apply_all(&self.spec.transforms, frames)?;
        let (descriptor, _) = self.aggregator.forward(&transformed, false, rng)?;
        moe_forward(&self.head, &descriptor)
    }

    /// Scored predictions in vocabulary label space, ranked, at most `top_k`.
    /// Frame sampling is seeded from the video id so predictions do not
    /// depend on dataset order.
    pub fn predict(&self, sample: &FrameSequence, top_k: usize) -> Result<Vec<(usize, f64)>> {
        let mut rng = SeededRng::from_text_seed(&sample.id);
        let probs = self.probabilities(&sample.frames, &mut rng)?;
        let ranked = predict_topk(&probs, top_k);
        Ok(ranked
            .into_iter()
            .map(|(head_index, conf)| {
                let label = match &self.filter {
                    Some(f) => f.vocab_label(head_index),
                    None => head_index,
                };
                (label, conf)
            })
            .collect())
    }

    /// Cross-entropy loss of one sample without touching gradients.
    pub fn loss(
        &self,
        frames: &Tensor2D,
        labels: &[usize],
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<f64> {
        let transformed = apply_all(&self.spec.transforms, frames)?;
        let (descriptor, _) = self.aggregator.forward(&transformed, training, rng)?;
        let probs = moe_forward(&self.head, &descriptor)?;
        Ok(bce_loss(&probs, &self.head_targets(labels)))
    }

    /// Forward + backward for one sample, accumulating parameter gradients
    /// into `grads`. Returns the loss.
    pub fn loss_and_grad(
        &self,
        frames: &Tensor2D,
        labels: &[usize],
        training: bool,
        rng: &mut SeededRng,
        grads: &mut ModelGrads,
    ) -> Result<f64> {
        let transformed = apply_all(&self.spec.transforms, frames)?;
        let (descriptor, agg_cache) = self.aggregator.forward(&transformed, training, rng)?;
        let (probs, moe_cache) = moe_forward_cached(&self.head, &descriptor)?;
        let targets = self.head_targets(labels);
        let loss = bce_loss(&probs, &targets);
        let d_probs = bce_grad(&probs, &targets);
        let d_descriptor =
            moe_backward(&self.head, &descriptor, &moe_cache, &d_probs, &mut grads.head);
        self.aggregator
            .backward(&agg_cache, &d_descriptor, &mut grads.aggregator);
        Ok(loss)
    }
}

/// Adapts a whole model (aggregator + head + loss) to [`GradCheckable`].
pub struct ModelProbe {
    pub model: Model,
    pub frames: Tensor2D,
    pub labels: Vec<usize>,
    pub training: bool,
    pub rng_seed: u64,
}

impl GradCheckable for ModelProbe {
    fn params(&self) -> Vec<f64> {
        self.model
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.values().iter().copied())
            .collect()
    }

    fn set_params(&mut self, theta: &[f64]) {
        let mut offset = 0;
        for (_, t) in self.model.tensors_mut() {
            let len = t.values().len();
            t.values_mut().copy_from_slice(&theta[offset..offset + len]);
            offset += len;
        }
    }

    fn param_name(&self, index: usize) -> String {
        let mut offset = 0;
        for (name, t) in self.model.tensors() {
            let len = t.values().len();
            if index < offset + len {
                return format!("{name}[{}]", index - offset);
            }
            offset += len;
        }
        format!("param[{index}]")
    }

    fn loss(&self) -> Result<f64> {
        let mut rng = SeededRng::new(self.rng_seed);
        self.model
            .loss(&self.frames, &self.labels, self.training, &mut rng)
    }

    fn analytic_grad(&self) -> Result<Vec<f64>> {
        let mut rng = SeededRng::new(self.rng_seed);
        let mut grads = self.model.zero_grads();
        self.model.loss_and_grad(
            &self.frames,
            &self.labels,
            self.training,
            &mut rng,
            &mut grads,
        )?;
        Ok(grads
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.values().iter().copied())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;

    fn dims() -> DataDims {
        DataDims {
            dim: 4,
            visual_dim: 3,
            audio_dim: 1,
            vocab: 3,
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
    fn init_is_deterministic() {
        let spec = ModelSpec {
            model: ModelKind::Gru {
                layers: vec![4],
                residual: false,
                dropout: 0.0,
                mode: RnnMode::Forward,
            },
            mixtures: 2,
            transforms: vec![],
            null_expert: false,
        };
        let a = Model::init(&spec, dims(), None, &mut SeededRng::new(7)).unwrap();
        let b = Model::init(&spec, dims(), None, &mut SeededRng::new(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn null_expert_is_rejected() {
        let spec = ModelSpec {
            model: ModelKind::MoeMeanpool,
            mixtures: 2,
            transforms: vec![],
            null_expert: true,
        };
        assert!(matches!(
            Model::init(&spec, dims(), None, &mut SeededRng::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn filtered_model_never_predicts_discarded_labels() {
        let spec = ModelSpec {
            model: ModelKind::MoeMeanpool,
            mixtures: 2,
            transforms: vec![],
            null_expert: false,
        };
        let filter = LabelFilter::from_kept(vec![0, 2]).unwrap();
        let model = Model::init(&spec, dims(), Some(filter), &mut SeededRng::new(3)).unwrap();
        let sample = FrameSequence {
            id: "x".into(),
            frames: random_frames(5, 4, 1),
            labels: vec![1],
        };
        let preds = model.predict(&sample, 20).unwrap();
        assert_eq!(preds.len(), 2);
        assert!(preds.iter().all(|&(l, _)| l == 0 || l == 2));
    }

    #[test]
    fn transforms_run_before_aggregation() {
        let spec = ModelSpec {
            model: ModelKind::MoeMeanpool,
            mixtures: 1,
            transforms: vec![TransformSpec::TemporalDifference],
            null_expert: false,
        };
        let model = Model::init(&spec, dims(), None, &mut SeededRng::new(3)).unwrap();
        // A constant sequence differences to all zeros, so probabilities sit
        // at the bias point regardless of the constant.
        let const_a = Tensor2D::from_rows(&vec![vec![5.0; 4]; 6]).unwrap();
        let const_b = Tensor2D::from_rows(&vec![vec![-2.0; 4]; 6]).unwrap();
        let pa = model
            .probabilities(&const_a, &mut SeededRng::new(0))
            .unwrap();
        let pb = model
            .probabilities(&const_b, &mut SeededRng::new(0))
            .unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn full_pipeline_gradient_matches_finite_differences() {
        let spec = ModelSpec {
            model: ModelKind::NetVlad {
                clusters_visual: 2,
                clusters_audio: 2,
                sample_size: None,
                intra_norm: false,
            },
            mixtures: 2,
            transforms: vec![],
            null_expert: false,
        };
        let model = Model::init(&spec, dims(), None, &mut SeededRng::new(11)).unwrap();
        let mut probe = ModelProbe {
            model,
            frames: random_frames(5, 4, 12),
            labels: vec![0, 2],
            training: false,
            rng_seed: 13,
        };
        let report = grad_check(&mut probe, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "rel {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }
}
