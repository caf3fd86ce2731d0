//! Explicit feed-forward networks: the compilation target.
//!
//! A network is an ordered list of layers, each `(weights, biases,
//! activation)`. Evaluation is plain sequential affine-then-activation with
//! a fixed accumulation order (row-major dot products, left to right), so
//! exactness assertions in the test suites mean bit equality across runs.
//!
//! The wire format is JSON:
//! `{"input_dim": n, "layers": [{"weights": [[..]], "biases": [..],
//! "activation": "relu" | {"modified_relu": {"k": .., "b": ..}} | "sigmoid"
//! | "linear"}], "metadata": "..."}`. The `linear` kind is used for readout
//! layers of value-approximating networks, which may emit negative values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dot, Hyperplane, Side};

/// Classification readout threshold: scalar outputs above it mean class 1,
/// exact zero means class 0, and anything in between is ambiguous.
pub const DEFAULT_CLS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `max(0, k·x + b)` with `k > 0`: a ReLU with rescaled slope and shifted
    /// threshold; equivalent to a plain ReLU after folding `k` and `b` into
    /// the incoming weights and bias.
    ModifiedRelu { k: f64, b: f64 },
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::ModifiedRelu { k, b } => (k * x + b).max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Linear => x,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Activation::ModifiedRelu { k, .. } if !(*k > 0.0) => Err(Error::InvariantViolation(
                format!("modified_relu requires k > 0, got {k}"),
            )),
            _ => Ok(()),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Vec<Vec<f64>>, biases: Vec<f64>, activation: Activation) -> Self {
        Self {
            weights,
            biases,
            activation,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        self.activation.validate()?;
        if self.biases.len() != self.weights.len() {
            return Err(Error::InvariantViolation(format!(
                "layer has {} weight rows but {} biases",
                self.weights.len(),
                self.biases.len()
            )));
        }
        let w = self.input_dim();
        if let Some(row) = self.weights.iter().find(|r| r.len() != w) {
            return Err(Error::InvariantViolation(format!(
                "ragged weight rows: {} vs {}",
                row.len(),
                w
            )));
        }
        Ok(())
    }

    /// Pre-activation affine image `Wx + b`.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.affine(x);
        for v in &mut out {
            *v = self.activation.apply(*v);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub metadata: String,
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>, metadata: impl Into<String>) -> Result<Self> {
        let net = Self {
            input_dim,
            layers,
            metadata: metadata.into(),
        };
        net.validate()?;
        Ok(net)
    }

    /// Widths must chain: layer `i` consumes exactly what layer `i-1` emits.
    pub fn validate(&self) -> Result<()> {
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if layer.input_dim() != width {
                return Err(Error::InvariantViolation(format!(
                    "layer {i} expects input width {}, previous width is {width}",
                    layer.input_dim()
                )));
            }
            width = layer.output_dim();
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Layer::output_dim)
    }

    /// Sequential evaluation. An empty layer list is the identity.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut state = x.to_vec();
        for layer in &self.layers {
            state = layer.forward(&state);
        }
        Ok(state)
    }

    /// Scalar convenience for single-output networks.
    pub fn forward_scalar(&self, x: &[f64]) -> Result<f64> {
        let out = self.forward(x)?;
        if out.len() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: out.len(),
            });
        }
        Ok(out[0])
    }

    /// Evaluation with every intermediate layer output recorded
    /// (post-activation), input excluded.
    pub fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut states = Vec::with_capacity(self.layers.len());
        let mut state = x.to_vec();
        for layer in &self.layers {
            state = layer.forward(&state);
            states.push(state.clone());
        }
        Ok(states)
    }

    /// Forward through the first `count` layers only.
    pub fn forward_partial(&self, x: &[f64], count: usize) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let mut state = x.to_vec();
        for layer in self.layers.iter().take(count) {
            state = layer.forward(&state);
        }
        Ok(state)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Network = serde_json::from_str(text).map_err(|e| Error::ParseError {
            context: format!("network document line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        net.validate()?;
        Ok(net)
    }
}

/// Readout decision for a scalar classification output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassReadout {
    Zero,
    One,
    /// Output in `(0, tol]`: too small to call, reported instead of rounded.
    Ambiguous,
}

pub fn classify_scalar(output: f64, tol: f64) -> ClassReadout {
    if output > tol {
        ClassReadout::One
    } else if output == 0.0 {
        ClassReadout::Zero
    } else if output > 0.0 {
        ClassReadout::Ambiguous
    } else {
        // Negative outputs can only come from linear readouts; treat as zero side.
        ClassReadout::Zero
    }
}

/// Argmax with ties broken toward the lowest class id.
pub fn argmax_class(outputs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in outputs.iter().enumerate().skip(1) {
        if *v > outputs[best] {
            best = i;
        }
    }
    best
}

/// The influence half-space of one hidden unit of a single-hidden-layer
/// network: the side of its hyperplane where the unit is nonzero and can
/// reach the output. `None` when every output weight from the unit is zero.
pub fn interference_halfspace(net: &Network, unit: usize) -> Result<Option<(Hyperplane, Side)>> {
    if net.layers.len() != 2 {
        return Err(Error::NotThreeLayer(net.layers.len() + 1));
    }
    let hidden = &net.layers[0];
    let output = &net.layers[1];
    if unit >= hidden.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: hidden.output_dim(),
            got: unit,
        });
    }
    let influences = output.weights.iter().any(|row| row[unit] != 0.0);
    if !influences {
        return Ok(None);
    }
    Ok(Some((
        Hyperplane::new(hidden.weights[unit].clone(), hidden.biases[unit]),
        Side::Positive,
    )))
}
