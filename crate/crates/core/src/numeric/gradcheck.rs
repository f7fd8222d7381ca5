use crate::error::{Error, Result};

/// A differentiable layer (or whole model) exposed as a flat parameter
/// vector with a scalar loss. Inputs and targets are captured by the
/// implementor; only parameters vary during a check.
pub trait GradCheckable {
    /// Current parameters, flattened in a fixed order.
    fn params(&self) -> Vec<f64>;

    /// Overwrite all parameters from a flat vector of the same length.
    fn set_params(&mut self, theta: &[f64]);

    /// Human-readable name of the scalar parameter at flat index `i`.
    fn param_name(&self, i: usize) -> String;

    /// Scalar loss at the current parameters. Must be deterministic: two
    /// calls without a parameter change return the same value.
    fn loss(&self) -> Result<f64>;

    /// Analytic gradient of the loss, same layout as [`GradCheckable::params`].
    fn analytic_grad(&self) -> Result<Vec<f64>>;
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// max over parameters of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// Name of the parameter attaining the max.
    pub worst_param: String,
}

/// Compares the analytic gradient against central differences
/// `(f(θ+ε) - f(θ-ε)) / 2ε`, one scalar parameter at a time.
pub fn grad_check(layer: &mut dyn GradCheckable, epsilon: f64) -> Result<GradReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::argument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let theta = layer.params();
    let analytic = layer.analytic_grad()?;
    if analytic.len() != theta.len() {
        return Err(Error::numeric(format!(
            "gradient length {} does not match parameter count {}",
            analytic.len(),
            theta.len()
        )));
    }

    let mut max_rel = 0.0;
    let mut worst = String::from("(none)");
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        probe[i] = theta[i] + epsilon;
        layer.set_params(&probe);
        let plus = layer.loss()?;
        probe[i] = theta[i] - epsilon;
        layer.set_params(&probe);
        let minus = layer.loss()?;
        probe[i] = theta[i];

        if !plus.is_finite() || !minus.is_finite() {
            layer.set_params(&theta);
            return Err(Error::numeric(format!(
                "non-finite loss while probing parameter {}",
                layer.param_name(i)
            )));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = 1.0f64.max(analytic[i].abs()).max(numeric.abs());
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = layer.param_name(i);
        }
    }
    layer.set_params(&theta);
    Ok(GradReport {
        max_rel_error: max_rel,
        worst_param: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // y = w·x with squared loss; the gradient is exact for quadratics.
    struct LinearSquared {
        w: Vec<f64>,
        x: Vec<f64>,
        target: f64,
    }

    impl GradCheckable for LinearSquared {
        fn params(&self) -> Vec<f64> {
            self.w.clone()
        }
        fn set_params(&mut self, theta: &[f64]) {
            self.w.copy_from_slice(theta);
        }
        fn param_name(&self, i: usize) -> String {
            format!("w[{i}]")
        }
        fn loss(&self) -> Result<f64> {
            let y: f64 = self.w.iter().zip(&self.x).map(|(w, x)| w * x).sum();
            Ok(0.5 * (y - self.target) * (y - self.target))
        }
        fn analytic_grad(&self) -> Result<Vec<f64>> {
            let y: f64 = self.w.iter().zip(&self.x).map(|(w, x)| w * x).sum();
            Ok(self.x.iter().map(|x| (y - self.target) * x).collect())
        }
    }

    #[test]
    fn linear_layer_is_near_exact() {
        let mut layer = LinearSquared {
            w: vec![0.3, -1.2, 0.7],
            x: vec![1.5, 2.0, -0.5],
            target: 0.9,
        };
        let report = grad_check(&mut layer, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-9,
            "rel {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn epsilon_range_is_enforced() {
        let mut layer = LinearSquared {
            w: vec![1.0],
            x: vec![1.0],
            target: 0.0,
        };
        assert!(matches!(
            grad_check(&mut layer, 1e-8),
            Err(Error::Argument(_))
        ));
        assert!(matches!(
            grad_check(&mut layer, 1e-2),
            Err(Error::Argument(_))
        ));
    }

    struct NanLoss;

    impl GradCheckable for NanLoss {
        fn params(&self) -> Vec<f64> {
            vec![0.0]
        }
        fn set_params(&mut self, _theta: &[f64]) {}
        fn param_name(&self, _i: usize) -> String {
            "p".into()
        }
        fn loss(&self) -> Result<f64> {
            Ok(f64::NAN)
        }
        fn analytic_grad(&self) -> Result<Vec<f64>> {
            Ok(vec![0.0])
        }
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let err = grad_check(&mut NanLoss, 1e-5).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains('p'), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
