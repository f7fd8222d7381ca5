use serde::{Deserialize, Serialize};

use super::model::{Model, ModelGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Parameter updater. Adam keeps first/second moment estimates shaped like
/// the model's gradients.
pub struct Optimizer {
    kind: OptimizerKind,
    moments: Option<(ModelGrads, ModelGrads)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &Model) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => Some((model.zero_grads(), model.zero_grads())),
        };
        Optimizer { kind, moments }
    }

    /// Applies one update. `step` is 1-based and drives Adam's bias
    /// correction.
    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, lr: f64, step: u64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, param), (_, grad)) in
                    model.tensors_mut().into_iter().zip(grads.tensors())
                {
                    for (p, g) in param.values_mut().iter_mut().zip(grad.values()) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (m, v) = self.moments.as_mut().expect("adam moments");
                let bias1 = 1.0 - ADAM_BETA1.powi(step as i32);
                let bias2 = 1.0 - ADAM_BETA2.powi(step as i32);
                for ((((_, param), (_, grad)), (_, m_t)), (_, v_t)) in model
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut())
                {
                    for (((p, &g), m_i), v_i) in param
                        .values_mut()
                        .iter_mut()
                        .zip(grad.values())
                        .zip(m_t.values_mut())
                        .zip(v_t.values_mut())
                    {
                        *m_i = ADAM_BETA1 * *m_i + (1.0 - ADAM_BETA1) * g;
                        *v_i = ADAM_BETA2 * *v_i + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m_i / bias1;
                        let v_hat = *v_i / bias2;
                        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ModelGrads, max_norm: f64) {
    let mut sum = 0.0;
    for (_, t) in grads.tensors() {
        for v in t.values() {
            sum += v * v;
        }
    }
    let norm = sum.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, t) in grads.tensors_mut() {
            for v in t.values_mut() {
                *v *= scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::SeededRng;
    use crate::training::{DataDims, Model, ModelKind, ModelSpec};

    fn tiny_model() -> Model {
        let spec = ModelSpec {
            model: ModelKind::MoeMeanpool,
            mixtures: 1,
            transforms: vec![],
            null_expert: false,
        };
        let dims = DataDims {
            dim: 3,
            visual_dim: 3,
            audio_dim: 0,
            vocab: 2,
        };
        Model::init(&spec, dims, None, &mut SeededRng::new(8)).unwrap()
    }

    #[test]
    fn sgd_step_matches_hand_computed_update() {
        let mut model = tiny_model();
        let before: Vec<f64> = model
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.values().to_vec())
            .collect();
        let mut grads = model.zero_grads();
        let mut fill = 0.25;
        for (_, t) in grads.tensors_mut() {
            for v in t.values_mut() {
                *v = fill;
                fill += 0.25;
            }
        }
        let grad_values: Vec<f64> = grads
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.values().to_vec())
            .collect();
        let lr = 0.05;
        Optimizer::new(OptimizerKind::Sgd, &model).step(&mut model, &grads, lr, 1);
        let after: Vec<f64> = model
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.values().to_vec())
            .collect();
        for ((b, g), a) in before.iter().zip(&grad_values).zip(&after) {
            assert!((a - (b - lr * g)).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_in_gradient_sign() {
        // With zero moments, step 1 gives m_hat = g, v_hat = g², so the
        // update is lr·g/(|g| + ε) ≈ lr·sign(g).
        let mut model = tiny_model();
        let before: Vec<f64> = model
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.values().to_vec())
            .collect();
        let mut grads = model.zero_grads();
        for (_, t) in grads.tensors_mut() {
            for v in t.values_mut() {
                *v = 2.0;
            }
        }
        Optimizer::new(OptimizerKind::Adam, &model).step(&mut model, &grads, 0.01, 1);
        let after: Vec<f64> = model
            .tensors()
            .iter()
            .flat_map(|(_, t)| t.values().to_vec())
            .collect();
        for (b, a) in before.iter().zip(&after) {
            assert!((a - (b - 0.01)).abs() < 1e-8);
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let model = tiny_model();
        let mut grads = model.zero_grads();
        for (_, t) in grads.tensors_mut() {
            for v in t.values_mut() {
                *v = 10.0;
            }
        }
        clip_global_norm(&mut grads, 5.0);
        let mut sum = 0.0;
        for (_, t) in grads.tensors() {
            for v in t.values() {
                sum += v * v;
            }
        }
        assert!((sum.sqrt() - 5.0).abs() < 1e-9);
    }
}
