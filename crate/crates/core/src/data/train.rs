//! Mini-batch SGD for the Dense/ReLU victim. This is the only code that ever
//! mutates weights; the result is frozen into a [`VictimModel`].

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::net::{forward, KeyMode, Layer, Tensor, VictimModel};
use crate::rng::{self, stream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_sizes: vec![32],
            epochs: 10,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 1,
        }
    }
}

struct DenseParams {
    out: usize,
    inp: usize,
    w: Vec<f32>,
    b: Vec<f32>,
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (x, y) in (&mut ac).zip(&mut bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    for (l, (x, y)) in ac.remainder().iter().zip(bc.remainder()).enumerate() {
        acc[l] += x * y;
    }
    acc.iter().sum()
}

fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Train a Dense/ReLU stack ending in `class_count` logits.
pub fn train_victim(train: &Dataset, config: &TrainConfig) -> Result<VictimModel> {
    if train.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config("batch_size and learning_rate must be positive".into()));
    }
    if config.hidden_sizes.contains(&0) {
        return Err(Error::Config("hidden layer sizes must be positive".into()));
    }
    let mut init = rng::derived(config.seed, stream::TRAIN_INIT);
    let mut shuffle = rng::derived(config.seed, stream::TRAIN_SHUFFLE);
    let mut sizes = vec![train.dim()];
    sizes.extend(&config.hidden_sizes);
    sizes.push(train.class_count());
    let mut params: Vec<DenseParams> = sizes
        .windows(2)
        .map(|p| {
            let (inp, out) = (p[0], p[1]);
            let limit = (6.0 / inp as f32).sqrt();
            DenseParams {
                out,
                inp,
                w: (0..out * inp).map(|_| init.random_range(-limit..limit)).collect(),
                b: vec![0.0; out],
            }
        })
        .collect();
    let mut grads: Vec<(Vec<f32>, Vec<f32>)> = params
        .iter()
        .map(|p| (vec![0.0; p.w.len()], vec![0.0; p.out]))
        .collect();
    let depth = params.len();
    let mut acts: Vec<Vec<f32>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut delta: Vec<Vec<f32>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let features = train.features();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            for (gw, gb) in &mut grads {
                gw.fill(0.0);
                gb.fill(0.0);
            }
            for &i in batch {
                acts[0].copy_from_slice(features.row(i));
                for (l, p) in params.iter().enumerate() {
                    let (prev, rest) = acts.split_at_mut(l + 1);
                    let input = &prev[l];
                    let output = &mut rest[0];
                    for o in 0..p.out {
                        let z = dot(&p.w[o * p.inp..(o + 1) * p.inp], input) + p.b[o];
                        output[o] = if l + 1 < depth { z.max(0.0) } else { z };
                    }
                }
                let logits = &acts[depth];
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let sum: f32 = logits.iter().map(|v| (v - max).exp()).sum();
                let y = train.labels()[i];
                epoch_loss += f64::from(sum.ln() - (logits[y] - max));
                for (c, d) in delta[depth].iter_mut().enumerate() {
                    *d = (logits[c] - max).exp() / sum - if c == y { 1.0 } else { 0.0 };
                }
                for l in (0..depth).rev() {
                    let p = &params[l];
                    let (gw, gb) = &mut grads[l];
                    let (lower, upper) = delta.split_at_mut(l + 1);
                    let d_out = &upper[0];
                    for o in 0..p.out {
                        if d_out[o] != 0.0 {
                            axpy(d_out[o], &acts[l], &mut gw[o * p.inp..(o + 1) * p.inp]);
                            gb[o] += d_out[o];
                        }
                    }
                    if l > 0 {
                        let d_in = &mut lower[l];
                        d_in.fill(0.0);
                        for o in 0..p.out {
                            if d_out[o] != 0.0 {
                                axpy(d_out[o], &p.w[o * p.inp..(o + 1) * p.inp], d_in);
                            }
                        }
                        for (d, &a) in d_in.iter_mut().zip(&acts[l]) {
                            if a <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                }
            }
            let step = config.learning_rate / batch.len() as f32;
            for (p, (gw, gb)) in params.iter_mut().zip(&grads) {
                axpy(-step, gw, &mut p.w);
                axpy(-step, gb, &mut p.b);
            }
        }
        let mean = epoch_loss / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!(
                "loss diverged to {mean} in epoch {epoch}"
            )));
        }
    }

    let mut layers = Vec::with_capacity(2 * depth);
    for (l, p) in params.into_iter().enumerate() {
        let weights = Tensor::new(vec![p.out, p.inp], p.w).map_err(|e| Error::Training(e.to_string()))?;
        let bias = Tensor::new(vec![p.out], p.b).map_err(|e| Error::Training(e.to_string()))?;
        layers.push(Layer::dense(weights, bias)?);
        if l + 1 < depth {
            layers.push(Layer::Relu);
        }
    }
    VictimModel::new(layers)
}

/// Overall top-1 accuracy in percent.
pub fn accuracy(model: &VictimModel, data: &Dataset, key_mode: &KeyMode) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("accuracy of an empty dataset".into()));
    }
    let predicted = forward(model, data.features(), key_mode)?.argmax_rows();
    let hits = predicted.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(100.0 * hits as f64 / data.len() as f64)
}
