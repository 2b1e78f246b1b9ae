//! Minimal tensor container, MLP layers with exact hand-derived
//! backpropagation, and an Adam optimizer. All backward passes are written
//! out per op; there is no autodiff graph.

mod adam;
mod checkpoint;
mod conv;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use conv::{conv3x3_backward, conv3x3_forward, Conv3x3, Conv3x3Grads};
pub use mlp::{mlp_backward, mlp_forward, mlp_init, LayerGrads, LayerParams, MlpCache, MlpGrads, MlpParams};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
}

/// Dense row-major value container.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; n] }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self, NetError> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(NetError::ShapeMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), values })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self { shape: self.shape.clone(), values: vec![0.0; self.values.len()] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
            Activation::Sigmoid => crate::util::sigmoid(x),
        }
    }

    /// Derivative at pre-activation input `x`.
    pub fn grad(&self, x: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_grad(x),
            Activation::Sigmoid => {
                let s = crate::util::sigmoid(x);
                s * (1.0 - s)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    None,
    LayerNorm,
}

impl Norm {
    pub fn name(&self) -> &'static str {
        match self {
            Norm::None => "none",
            Norm::LayerNorm => "layernorm",
        }
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let phi_cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let phi_pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    phi_cdf + x * phi_pdf
}

/// Spec of a dense stack: `widths.len() - 1` layers, one activation and one
/// normalization choice per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub acts: Vec<Activation>,
    pub norms: Vec<Norm>,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, acts: Vec<Activation>, norms: Vec<Norm>, init_seed: u64) -> Result<Self, NetError> {
        if widths.len() < 2 {
            return Err(NetError::ShapeMismatch("need at least one layer".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(NetError::ShapeMismatch("zero-width layer".into()));
        }
        let n_layers = widths.len() - 1;
        if acts.len() != n_layers || norms.len() != n_layers {
            return Err(NetError::ShapeMismatch(format!(
                "{n_layers} layers need {n_layers} activations/norms, got {}/{}",
                acts.len(),
                norms.len()
            )));
        }
        Ok(Self { widths, acts, norms, init_seed })
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Canonical description string; hashed into checkpoint spec hashes.
    pub fn describe(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let acts: Vec<&str> = self.acts.iter().map(|a| a.name()).collect();
        let norms: Vec<&str> = self.norms.iter().map(|n| n.name()).collect();
        format!("mlp[{}|{}|{}]", widths.join(","), acts.join(","), norms.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rel_close;

    fn fd_scalar<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_grads_match_finite_differences() {
        for act in [Activation::Relu, Activation::Gelu, Activation::Sigmoid, Activation::None] {
            for &x in &[-2.3, -0.9, 0.4, 1.7, 3.1] {
                let fd = fd_scalar(|v| act.apply(v), x, 1e-6);
                assert!(
                    rel_close(act.grad(x), fd, 1e-7, 1e-10),
                    "{} grad at {x}: {} vs fd {}",
                    act.name(),
                    act.grad(x),
                    fd
                );
            }
        }
    }

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        // gelu(1) = 0.5 * (1 + erf(1/sqrt(2))) = Phi(1) = 0.8413447460685429.
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((Activation::Sigmoid.apply(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![4], vec![], vec![], 0).is_err());
        assert!(MlpSpec::new(vec![4, 3], vec![Activation::Relu], vec![Norm::None, Norm::None], 0)
            .is_err());
        let s = MlpSpec::new(
            vec![4, 8, 2],
            vec![Activation::Gelu, Activation::None],
            vec![Norm::LayerNorm, Norm::None],
            7,
        )
        .unwrap();
        assert_eq!(s.describe(), "mlp[4,8,2|gelu,none|layernorm,none]");
    }
}
