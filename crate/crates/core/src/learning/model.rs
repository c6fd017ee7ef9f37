//! Model parameters for a small multilayer perceptron.
//!
//! Weights are row-major `outputs x inputs` so a layer maps an `inputs`
//! vector to an `outputs` vector. The canonical byte form (layer order,
//! weights row-major then bias, 8-byte big-endian doubles) is the single
//! source of truth for hashing, chunking, and wire transfer.

use rand_chacha::ChaCha8Rng;

use super::{standard_normal, LearnError};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    /// Length `outputs`.
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        LayerParams {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.inputs + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// He-initialized perceptron over the given layer widths, e.g.
    /// `[784, 32, 10]` for input -> 32 hidden (ReLU) -> 10 classes.
    pub fn new_mlp(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (inputs, outputs) = (pair[0], pair[1]);
            let scale = (2.0 / inputs as f64).sqrt();
            let weights = (0..inputs * outputs)
                .map(|_| standard_normal(rng) * scale)
                .collect();
            layers.push(LayerParams {
                inputs,
                outputs,
                weights,
                bias: vec![0.0; outputs],
            });
        }
        ModelParams { layers }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .map(|p| LayerParams::zeros(p[0], p[1]))
            .collect();
        ModelParams { layers }
    }

    /// `(inputs, outputs)` per layer.
    pub fn shape(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.inputs, l.outputs)).collect()
    }

    pub fn input_dims(&self) -> usize {
        self.layers.first().map(|l| l.inputs).unwrap_or(0)
    }

    pub fn output_classes(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weights.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(LearnError::ShapeMismatch {
                    layer: i,
                    expected: layer.inputs * layer.outputs,
                    got: layer.weights.len(),
                });
            }
            if i > 0 && layer.inputs != self.layers[i - 1].outputs {
                return Err(LearnError::ShapeMismatch {
                    layer: i,
                    expected: self.layers[i - 1].outputs,
                    got: layer.inputs,
                });
            }
            let finite = layer.weights.iter().chain(layer.bias.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(LearnError::NonFiniteParams);
            }
        }
        Ok(())
    }

    /// Iterate every parameter in canonical order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    /// Apply `f` to every parameter in place, canonical order.
    pub fn map_in_place(&mut self, mut f: impl FnMut(f64) -> f64) {
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = f(*w);
            }
        }
    }

    /// Canonical serialization: per layer, weights row-major then bias,
    /// every value an 8-byte big-endian IEEE double.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 8);
        for layer in &self.layers {
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    pub fn from_canonical_bytes(
        shape: &[(usize, usize)],
        bytes: &[u8],
    ) -> Result<Self, LearnError> {
        let expected: usize = shape.iter().map(|(i, o)| (i * o + o) * 8).sum();
        if bytes.len() != expected {
            return Err(LearnError::ShapeMismatch {
                layer: 0,
                expected,
                got: bytes.len(),
            });
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let vals: Vec<f64> = bytes[pos..pos + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
                .collect();
            pos += n * 8;
            vals
        };
        let layers = shape
            .iter()
            .map(|&(inputs, outputs)| LayerParams {
                inputs,
                outputs,
                weights: take(inputs * outputs),
                bias: take(outputs),
            })
            .collect();
        Ok(ModelParams { layers })
    }
}
