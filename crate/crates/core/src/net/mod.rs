//! Frozen-weight layered inference with locked neurons.
//!
//! A [`VictimModel`] is a stack of [`Layer`]s plus [`LockBinding`]s that map
//! model neurons onto the locked hardware neuron. A binding either wraps the
//! neuron's post-activation value (`NonLinearity`) or one input product of
//! its multiply-accumulate (`Multiplier`). All bindings share one key.
//!
//! Hard and unlocked inference run in `f32`. The relaxed-key path switches
//! to `f64` from the first bound layer onward, which is also where reverse
//! mode starts: nothing upstream of it depends on the key.

mod engine;
mod io;
mod tensor;

use serde::{Deserialize, Serialize};

use crate::locking::{KeyVector, PointLockScheme, SoftKey};
use crate::{Error, Result};

pub use engine::{HardTrace, PrefixCache};
pub(crate) use engine::{cross_entropy, soft_loss_grad};
pub use io::{decode_model, encode_model, model_hash, read_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `weights` is `[out x in]`, `bias` is `[out]`.
    Dense { weights: Tensor, bias: Tensor },
    Relu,
    Softmax,
}

impl Layer {
    pub fn dense(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 || bias.shape().len() != 1 || bias.shape()[0] != weights.shape()[0] {
            return Err(Error::Input(format!(
                "dense layer shapes disagree: weights {:?}, bias {:?}",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Layer::Dense { weights, bias })
    }

    fn dims(&self) -> Option<(usize, usize)> {
        match self {
            Layer::Dense { weights, .. } => Some((weights.shape()[0], weights.shape()[1])),
            _ => None,
        }
    }
}

/// Where the locking function wraps a bound neuron's computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Wraps `f(sum_j s_ij + b_i)`; `f` is the ReLU directly after the dense
    /// layer, or the identity when none follows.
    NonLinearity,
    /// Wraps the single product `s_ij = x_j * w_ij` before summation.
    Multiplier { input_index: usize },
}

/// Model neurons mapped onto the locked hardware neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LockBinding {
    /// Index of a dense layer in the model.
    pub layer_index: usize,
    pub neuron_indices: Vec<usize>,
    pub placement: Placement,
    pub scheme: PointLockScheme,
}

/// How the lock key is presented to the network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KeyMode {
    Unlocked,
    Hard(KeyVector),
    Soft(SoftKey),
}

/// A lock site: one bound neuron (and input, for multiplier placement).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Site {
    pub binding: usize,
    pub neuron: usize,
    pub input: usize,
}

/// Lock sites grouped by the layer whose computation they touch.
#[derive(Clone, Debug, Default)]
pub(crate) struct LockPlan {
    /// Per layer: post-output wraps applied after that layer runs.
    pub nonlin: Vec<Vec<Site>>,
    /// Per dense layer: product wraps, sorted by neuron then input.
    pub products: Vec<Vec<Site>>,
    /// Earliest layer whose computation the key can change.
    pub first_bound_layer: Option<usize>,
}

/// Frozen network plus lock bindings.
#[derive(Clone, Debug)]
pub struct VictimModel {
    layers: Vec<Layer>,
    bindings: Vec<LockBinding>,
    class_count: usize,
    input_dim: usize,
    plan: LockPlan,
}

impl VictimModel {
    /// Validate the layer chain; the last dense layer fixes the class count.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut input_dim = None;
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if let Some((out, inp)) = layer.dims() {
                if let Some(w) = width {
                    if w != inp {
                        return Err(Error::Input(format!(
                            "layer {i} expects {inp} inputs but receives {w}"
                        )));
                    }
                }
                input_dim.get_or_insert(inp);
                width = Some(out);
            } else if width.is_none() {
                return Err(Error::Input(format!(
                    "layer {i} is an activation before any dense layer"
                )));
            }
        }
        let (Some(input_dim), Some(class_count)) = (input_dim, width) else {
            return Err(Error::Input("model needs at least one dense layer".into()));
        };
        Ok(VictimModel {
            plan: LockPlan {
                nonlin: vec![Vec::new(); layers.len()],
                products: vec![Vec::new(); layers.len()],
                first_bound_layer: None,
            },
            layers,
            bindings: Vec::new(),
            class_count,
            input_dim,
        })
    }

    /// Attach bindings after checking indices, uniqueness and key agreement.
    pub fn with_bindings(mut self, bindings: Vec<LockBinding>) -> Result<Self> {
        let mut plan = LockPlan {
            nonlin: vec![Vec::new(); self.layers.len()],
            products: vec![Vec::new(); self.layers.len()],
            first_bound_layer: None,
        };
        let mut seen = std::collections::BTreeSet::new();
        for (b, binding) in bindings.iter().enumerate() {
            binding.scheme.validate()?;
            if let Some(first) = bindings.first() {
                if binding.scheme.key_width_bits != first.scheme.key_width_bits
                    || binding.scheme.correct_key != first.scheme.correct_key
                {
                    return Err(Error::Config(
                        "all bindings must share one key width and correct key".into(),
                    ));
                }
            }
            let l = binding.layer_index;
            let Some((out, inp)) = self.layers.get(l).and_then(Layer::dims) else {
                return Err(Error::Config(format!(
                    "binding {b}: layer {l} is not a dense layer"
                )));
            };
            if binding.neuron_indices.is_empty() {
                return Err(Error::Config(format!("binding {b}: no neurons listed")));
            }
            for &n in &binding.neuron_indices {
                if n >= out {
                    return Err(Error::Config(format!(
                        "binding {b}: neuron {n} out of range for layer {l} with {out} neurons"
                    )));
                }
                let (kind, input) = match binding.placement {
                    Placement::NonLinearity => (0u8, 0usize),
                    Placement::Multiplier { input_index } => {
                        if input_index >= inp {
                            return Err(Error::Config(format!(
                                "binding {b}: input index {input_index} out of range for layer {l} with {inp} inputs"
                            )));
                        }
                        (1u8, input_index)
                    }
                };
                if !seen.insert((l, n, kind, input)) {
                    return Err(Error::Config(format!(
                        "binding {b}: layer {l} neuron {n} is already bound at this placement"
                    )));
                }
                let site = Site {
                    binding: b,
                    neuron: n,
                    input,
                };
                let at = match binding.placement {
                    Placement::NonLinearity => {
                        let at = if matches!(self.layers.get(l + 1), Some(Layer::Relu)) {
                            l + 1
                        } else {
                            l
                        };
                        plan.nonlin[at].push(site);
                        at
                    }
                    Placement::Multiplier { .. } => {
                        plan.products[l].push(site);
                        l
                    }
                };
                plan.first_bound_layer = Some(plan.first_bound_layer.map_or(at, |f: usize| f.min(at)));
            }
        }
        for sites in &mut plan.products {
            sites.sort_by_key(|s| (s.neuron, s.input));
        }
        self.bindings = bindings;
        self.plan = plan;
        Ok(self)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn bindings(&self) -> &[LockBinding] {
        &self.bindings
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Scheme shared by every binding, if any are attached.
    pub fn scheme(&self) -> Option<&PointLockScheme> {
        self.bindings.first().map(|b| &b.scheme)
    }

    pub fn first_bound_layer(&self) -> Option<usize> {
        self.plan.first_bound_layer
    }

    pub(crate) fn plan(&self) -> &LockPlan {
        &self.plan
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim {
            return Err(Error::Input(format!(
                "batch shape {:?} does not match model input size {}",
                batch.shape(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn check_key(&self, key_mode: &KeyMode) -> Result<()> {
        match key_mode {
            KeyMode::Unlocked => Ok(()),
            KeyMode::Hard(key) => match self.scheme() {
                Some(s) if key.width_bits != s.key_width_bits => Err(Error::Config(format!(
                    "key width {} does not match scheme key width {}",
                    key.width_bits, s.key_width_bits
                ))),
                _ => Ok(()),
            },
            KeyMode::Soft(soft) => soft.validate(),
        }
    }

    fn check_labels(&self, rows: usize, labels: &[usize]) -> Result<()> {
        check_labels(rows, self.class_count, labels)
    }
}

fn check_labels(rows: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Input(format!(
            "{} labels for {rows} samples",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Input(format!(
            "label {y} at position {i} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Logits for `batch` (`[B x features]`) under the given key.
pub fn forward(model: &VictimModel, batch: &Tensor, key_mode: &KeyMode) -> Result<Tensor> {
    model.check_batch(batch)?;
    model.check_key(key_mode)?;
    let rows = batch.rows();
    let out = match *key_mode {
        KeyMode::Unlocked => engine::run_f32(model, 0, batch.data().to_vec(), rows, None),
        KeyMode::Hard(key) => engine::run_f32(model, 0, batch.data().to_vec(), rows, Some(key.code)),
        KeyMode::Soft(soft) => {
            let prefix = PrefixCache::build(model, batch)?;
            let all: Vec<usize> = (0..rows).collect();
            engine::soft_logits(model, &prefix, &all, &soft)
                .into_iter()
                .map(|v| v as f32)
                .collect()
        }
    };
    Ok(Tensor::from_raw(vec![rows, model.class_count()], out))
}

/// Unlocked outputs of layer `layer` (its activations after that layer has
/// run), as `[B x width]`.
pub fn activations(model: &VictimModel, batch: &Tensor, layer: usize) -> Result<Tensor> {
    model.check_batch(batch)?;
    if layer >= model.layers.len() {
        return Err(Error::Input(format!(
            "layer {layer} out of range for a {}-layer model",
            model.layers.len()
        )));
    }
    let rows = batch.rows();
    let out = engine::run_prefix_f32(model, layer + 1, batch.data().to_vec(), rows);
    let width = out.len().checked_div(rows).unwrap_or(0);
    Ok(Tensor::from_raw(vec![rows, width], out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row: Vec<f64> = logits.row(r).iter().map(|&v| f64::from(v)).collect();
            engine::softmax_row(&row)
        })
        .collect()
}

/// Cross-entropy of each row against its label.
pub fn per_sample_loss(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits.rows(), logits.cols(), labels)?;
    Ok((0..logits.rows())
        .map(|r| {
            let row: Vec<f64> = logits.row(r).iter().map(|&v| f64::from(v)).collect();
            engine::cross_entropy(&row, labels[r])
        })
        .collect())
}

/// Mean categorical cross-entropy over the batch.
pub fn loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let losses = per_sample_loss(logits, labels)?;
    if losses.is_empty() {
        return Err(Error::Input("loss of an empty batch".into()));
    }
    Ok(engine::mean(&losses))
}

/// Loss under the relaxed key and its exact derivative with respect to kappa.
pub fn grad_kappa(
    model: &VictimModel,
    batch: &Tensor,
    labels: &[usize],
    soft: &SoftKey,
) -> Result<(f64, f64)> {
    if model.bindings().is_empty() {
        return Err(Error::Config("grad_kappa needs at least one lock binding".into()));
    }
    model.check_batch(batch)?;
    model.check_labels(batch.rows(), labels)?;
    soft.validate()?;
    let prefix = PrefixCache::build(model, batch)?;
    let all: Vec<usize> = (0..batch.rows()).collect();
    Ok(engine::soft_loss_grad(model, &prefix, &all, labels, soft, true))
}

/// Loss under the relaxed key, without the gradient.
pub fn soft_loss(model: &VictimModel, batch: &Tensor, labels: &[usize], soft: &SoftKey) -> Result<f64> {
    model.check_batch(batch)?;
    model.check_labels(batch.rows(), labels)?;
    soft.validate()?;
    let prefix = PrefixCache::build(model, batch)?;
    let all: Vec<usize> = (0..batch.rows()).collect();
    Ok(engine::soft_loss_grad(model, &prefix, &all, labels, soft, false).0)
}

/// Exact kappa derivative split into the contribution of each binding, with
/// every other binding's relaxed corruption active. Sums to [`grad_kappa`].
pub fn grad_kappa_by_binding(
    model: &VictimModel,
    batch: &Tensor,
    labels: &[usize],
    soft: &SoftKey,
) -> Result<Vec<f64>> {
    if model.bindings().is_empty() {
        return Err(Error::Config("grad_kappa needs at least one lock binding".into()));
    }
    model.check_batch(batch)?;
    model.check_labels(batch.rows(), labels)?;
    soft.validate()?;
    let prefix = PrefixCache::build(model, batch)?;
    let all: Vec<usize> = (0..batch.rows()).collect();
    Ok(engine::soft_loss_grad_parts(model, &prefix, &all, labels, soft, true).1)
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central difference of the relaxed-key loss in kappa with step `h`.
pub fn finite_diff_grad(
    model: &VictimModel,
    batch: &Tensor,
    labels: &[usize],
    soft: &SoftKey,
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Input(format!("finite-difference step must be > 0, got {h}")));
    }
    model.check_batch(batch)?;
    model.check_labels(batch.rows(), labels)?;
    soft.validate()?;
    let prefix = PrefixCache::build(model, batch)?;
    let all: Vec<usize> = (0..batch.rows()).collect();
    let at = |kappa: f64| {
        let shifted = SoftKey { kappa, ..*soft };
        engine::soft_loss_grad(model, &prefix, &all, labels, &shifted, false).0
    };
    Ok(central_difference(at, soft.kappa, h))
}

#[cfg(test)]
mod tests;
