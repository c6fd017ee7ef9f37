//! Forward/backward pass, seeded mini-batch SGD, and evaluation.
//!
//! The network is a perceptron with ReLU on every hidden layer and
//! softmax cross-entropy on the output. Gradients are averaged over the
//! mini-batch; batch order comes from a ChaCha stream seeded by the
//! train config, so identical inputs give bit-identical outputs.

use rand::seq::SliceRandom;

use super::model::ModelParams;
use super::{DatasetPartition, LearnError, TrainConfig};
use crate::crypto::seeded_rng;

struct Forward {
    /// Post-activation per layer, front to back; last entry is the logits.
    activations: Vec<Vec<f64>>,
}

fn forward(params: &ModelParams, input: &[f64]) -> Forward {
    let n_layers = params.layers.len();
    let mut activations = Vec::with_capacity(n_layers);
    let mut current = input;
    for (li, layer) in params.layers.iter().enumerate() {
        let mut out = vec![0.0; layer.outputs];
        for row in 0..layer.outputs {
            let mut acc = layer.bias[row];
            let w = &layer.weights[row * layer.inputs..(row + 1) * layer.inputs];
            for (wi, xi) in w.iter().zip(current) {
                acc += wi * xi;
            }
            // ReLU on all but the output layer
            out[row] = if li + 1 < n_layers { acc.max(0.0) } else { acc };
        }
        activations.push(out);
        current = activations.last().unwrap();
    }
    Forward { activations }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Argmax class with ties broken by the lowest class index.
pub fn predict(params: &ModelParams, input: &[f64]) -> u32 {
    let fwd = forward(params, input);
    let logits = fwd.activations.last().unwrap();
    let mut best = 0usize;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Fraction of samples whose predicted class equals the label;
/// exactly `1 - errors/sample_count`.
pub fn evaluate(params: &ModelParams, data: &DatasetPartition) -> Result<f64, LearnError> {
    if data.sample_count() == 0 {
        return Err(LearnError::EmptyData);
    }
    if params.input_dims() != data.dims() {
        return Err(LearnError::DimensionMismatch {
            model: params.input_dims(),
            data: data.dims(),
        });
    }
    let mut x = Vec::with_capacity(data.dims());
    let mut correct = 0usize;
    for i in 0..data.sample_count() {
        data.feature(i, &mut x);
        if predict(params, &x) == data.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.sample_count() as f64)
}

/// Mean softmax cross-entropy of the model over the view.
pub fn evaluate_loss(params: &ModelParams, data: &DatasetPartition) -> Result<f64, LearnError> {
    if data.sample_count() == 0 {
        return Err(LearnError::EmptyData);
    }
    if params.input_dims() != data.dims() {
        return Err(LearnError::DimensionMismatch {
            model: params.input_dims(),
            data: data.dims(),
        });
    }
    let mut x = Vec::with_capacity(data.dims());
    let mut total = 0.0;
    for i in 0..data.sample_count() {
        data.feature(i, &mut x);
        let fwd = forward(params, &x);
        let probs = softmax(fwd.activations.last().unwrap());
        let p = probs[data.label(i) as usize].max(f64::MIN_POSITIVE);
        total += -p.ln();
    }
    Ok(total / data.sample_count() as f64)
}

/// Mean loss and mean gradients of the batch, in model shape.
pub fn loss_and_gradients(
    params: &ModelParams,
    data: &DatasetPartition,
    batch: &[usize],
) -> Result<(f64, ModelParams), LearnError> {
    if batch.is_empty() {
        return Err(LearnError::EmptyData);
    }
    let widths: Vec<usize> = std::iter::once(params.input_dims())
        .chain(params.layers.iter().map(|l| l.outputs))
        .collect();
    let mut grads = ModelParams::zeros(&widths);
    let mut total_loss = 0.0;
    let mut x = Vec::with_capacity(data.dims());
    let n_layers = params.layers.len();

    for &sample in batch {
        data.feature(sample, &mut x);
        let label = data.label(sample) as usize;
        let fwd = forward(params, &x);
        let probs = softmax(fwd.activations.last().unwrap());
        total_loss += -probs[label].max(f64::MIN_POSITIVE).ln();

        // delta for the output layer: softmax - onehot
        let mut delta: Vec<f64> = probs;
        delta[label] -= 1.0;

        for li in (0..n_layers).rev() {
            let layer = &params.layers[li];
            let input: &[f64] = if li == 0 {
                &x
            } else {
                &fwd.activations[li - 1]
            };
            {
                let g = &mut grads.layers[li];
                for row in 0..layer.outputs {
                    let d = delta[row];
                    g.bias[row] += d;
                    let grow = &mut g.weights[row * layer.inputs..(row + 1) * layer.inputs];
                    for (gw, xi) in grow.iter_mut().zip(input) {
                        *gw += d * xi;
                    }
                }
            }
            if li > 0 {
                // propagate through W^T then the ReLU mask of layer li-1
                let mut next = vec![0.0; layer.inputs];
                for row in 0..layer.outputs {
                    let d = delta[row];
                    let w = &layer.weights[row * layer.inputs..(row + 1) * layer.inputs];
                    for (nj, wj) in next.iter_mut().zip(w) {
                        *nj += d * wj;
                    }
                }
                for (nj, &a) in next.iter_mut().zip(&fwd.activations[li - 1]) {
                    if a <= 0.0 {
                        *nj = 0.0;
                    }
                }
                delta = next;
            }
        }
    }

    let inv = 1.0 / batch.len() as f64;
    grads.map_in_place(|g| g * inv);
    Ok((total_loss * inv, grads))
}

/// Seeded mini-batch gradient descent on cross-entropy. Returns the
/// updated parameters and the mean loss over the final epoch. Non-finite
/// values abort with a divergence error instead of being clipped.
pub fn local_train(
    params: &ModelParams,
    data: &DatasetPartition,
    cfg: &TrainConfig,
) -> Result<(ModelParams, f64), LearnError> {
    cfg.validate()?;
    params.validate()?;
    if data.sample_count() == 0 {
        return Err(LearnError::EmptyData);
    }
    if params.input_dims() != data.dims() {
        return Err(LearnError::DimensionMismatch {
            model: params.input_dims(),
            data: data.dims(),
        });
    }

    let mut model = params.clone();
    let mut order: Vec<usize> = (0..data.sample_count()).collect();
    let mut rng = seeded_rng(cfg.seed, 0, "train-shuffle");
    let mut final_epoch_loss = 0.0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = loss_and_gradients(&model, data, batch)?;
            if !loss.is_finite() {
                return Err(LearnError::Diverged { epoch });
            }
            epoch_loss += loss * batch.len() as f64;
            for (layer, glayer) in model.layers.iter_mut().zip(&grads.layers) {
                for (w, g) in layer
                    .weights
                    .iter_mut()
                    .chain(layer.bias.iter_mut())
                    .zip(glayer.weights.iter().chain(glayer.bias.iter()))
                {
                    *w -= cfg.learning_rate * g;
                }
            }
        }
        final_epoch_loss = epoch_loss / data.sample_count() as f64;
        if model.validate().is_err() {
            return Err(LearnError::Diverged { epoch });
        }
    }

    Ok((model, final_epoch_loss))
}
