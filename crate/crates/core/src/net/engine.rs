//! Layer evaluation shared by the hard (`f32`) and relaxed (`f64`) paths.

use std::ops::{Add, Mul, Sub};

use super::{Layer, Site, Tensor, VictimModel};
use crate::locking::{quantize, soft_lock_eval, SoftKey, SoftLockEval};
use crate::Result;

pub(crate) trait Real: Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> {
    const ZERO: Self;
    fn from_f32(v: f32) -> Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    #[inline]
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
}

const LANES: usize = 8;

/// Eight-lane dot product; term `j` always lands in lane `j % 8` so the
/// locked and unlocked paths sum in the same order.
#[inline]
fn dot<T: Real>(x: &[T], w: &[f32]) -> T {
    let mut acc = [T::ZERO; LANES];
    let mut xc = x.chunks_exact(LANES);
    let mut wc = w.chunks_exact(LANES);
    for (xs, ws) in (&mut xc).zip(&mut wc) {
        for l in 0..LANES {
            acc[l] = acc[l] + xs[l] * T::from_f32(ws[l]);
        }
    }
    for (l, (&xv, &wv)) in xc.remainder().iter().zip(wc.remainder()).enumerate() {
        acc[l] = acc[l] + xv * T::from_f32(wv);
    }
    reduce(acc)
}

#[inline]
fn reduce<T: Real>(a: [T; LANES]) -> T {
    ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]))
}

/// Dot product where some terms are passed through `wrap` first. `locked`
/// lists `(position in plan, input index)` sorted by input index.
#[inline]
fn dot_locked<T: Real>(x: &[T], w: &[f32], locked: &[(usize, usize)], mut wrap: impl FnMut(usize, T) -> T) -> T {
    let mut acc = [T::ZERO; LANES];
    let mut next = 0;
    for (j, (&xv, &wv)) in x.iter().zip(w).enumerate() {
        let mut term = xv * T::from_f32(wv);
        while next < locked.len() && locked[next].1 == j {
            term = wrap(locked[next].0, term);
            next += 1;
        }
        acc[j % LANES] = acc[j % LANES] + term;
    }
    reduce(acc)
}

/// Hook invoked at every lock site during a forward pass.
pub(crate) trait Wrap<T> {
    /// Post-output wrap at `layer`; `pos` indexes `plan.nonlin[layer]`.
    fn nonlin(&mut self, layer: usize, pos: usize, sample: usize, site: &Site, x: T) -> T;
    /// Product wrap in dense `layer`; `pos` indexes `plan.products[layer]`.
    fn product(&mut self, layer: usize, pos: usize, sample: usize, site: &Site, s: T) -> T;
}

struct NoLock;

impl<T> Wrap<T> for NoLock {
    fn nonlin(&mut self, _: usize, _: usize, _: usize, _: &Site, x: T) -> T {
        x
    }
    fn product(&mut self, _: usize, _: usize, _: usize, _: &Site, s: T) -> T {
        s
    }
}

struct HardLock<'a> {
    model: &'a VictimModel,
    code: u32,
}

impl Wrap<f32> for HardLock<'_> {
    #[inline]
    fn nonlin(&mut self, _: usize, _: usize, _: usize, site: &Site, x: f32) -> f32 {
        self.model.bindings[site.binding].scheme.apply_hard_code(x, self.code)
    }
    #[inline]
    fn product(&mut self, _: usize, _: usize, _: usize, site: &Site, s: f32) -> f32 {
        self.model.bindings[site.binding].scheme.apply_hard_code(s, self.code)
    }
}

/// Records the quantized code seen at every lock site, leaving values intact.
struct CodeRecorder<'a> {
    model: &'a VictimModel,
    codes: Vec<Vec<u32>>,
}

impl Wrap<f32> for CodeRecorder<'_> {
    fn nonlin(&mut self, _: usize, _: usize, sample: usize, site: &Site, x: f32) -> f32 {
        self.codes[sample].push(quantize(x, &self.model.bindings[site.binding].scheme));
        x
    }
    fn product(&mut self, _: usize, _: usize, sample: usize, site: &Site, s: f32) -> f32 {
        self.codes[sample].push(quantize(s, &self.model.bindings[site.binding].scheme));
        s
    }
}

/// Soft lock that keeps local derivatives for the backward pass.
struct SoftTape<'a> {
    model: &'a VictimModel,
    soft: SoftKey,
    rows: usize,
    /// Per layer, indexed `pos * rows + sample`.
    nonlin: Vec<Vec<SoftLockEval>>,
    /// Per layer, indexed `sample * sites + pos`.
    products: Vec<Vec<SoftLockEval>>,
}

const EMPTY_EVAL: SoftLockEval = SoftLockEval {
    value: 0.0,
    d_dx: 1.0,
    d_dkappa: 0.0,
};

impl<'a> SoftTape<'a> {
    fn new(model: &'a VictimModel, soft: SoftKey, rows: usize) -> Self {
        let plan = model.plan();
        SoftTape {
            model,
            soft,
            rows,
            nonlin: plan.nonlin.iter().map(|s| vec![EMPTY_EVAL; s.len() * rows]).collect(),
            products: plan.products.iter().map(|s| vec![EMPTY_EVAL; s.len() * rows]).collect(),
        }
    }
}

impl Wrap<f64> for SoftTape<'_> {
    fn nonlin(&mut self, layer: usize, pos: usize, sample: usize, site: &Site, x: f64) -> f64 {
        let eval = soft_lock_eval(x, &self.soft, &self.model.bindings[site.binding].scheme);
        self.nonlin[layer][pos * self.rows + sample] = eval;
        eval.value
    }
    fn product(&mut self, layer: usize, pos: usize, sample: usize, site: &Site, s: f64) -> f64 {
        let eval = soft_lock_eval(s, &self.soft, &self.model.bindings[site.binding].scheme);
        let sites = self.model.plan().products[layer].len();
        self.products[layer][sample * sites + pos] = eval;
        eval.value
    }
}

fn width_after(model: &VictimModel, layer: usize, input_width: usize) -> usize {
    match &model.layers[layer] {
        Layer::Dense { weights, .. } => weights.shape()[0],
        _ => input_width,
    }
}

/// Evaluate layers `start..end` on `rows` samples stored row-major in `input`.
/// When `inputs` is given, the input of every evaluated layer is kept.
fn run<T: Real + Exp, W: Wrap<T>>(
    model: &VictimModel,
    start: usize,
    end: usize,
    mut cur: Vec<T>,
    rows: usize,
    wrap: &mut W,
    mut inputs: Option<&mut Vec<Vec<T>>>,
) -> Vec<T> {
    if rows == 0 {
        return Vec::new();
    }
    let plan = model.plan();
    let mut width = cur.len() / rows;
    for l in start..end {
        if let Some(keep) = inputs.as_mut() {
            keep.push(cur.clone());
        }
        cur = match &model.layers[l] {
            Layer::Dense { weights, bias } => {
                let (out, inp) = (weights.shape()[0], weights.shape()[1]);
                debug_assert_eq!(width, inp);
                let w = weights.data();
                let b = bias.data();
                let sites = &plan.products[l];
                let mut next = vec![T::ZERO; rows * out];
                let mut locked: Vec<(usize, usize)> = Vec::new();
                for r in 0..rows {
                    let x = &cur[r * inp..(r + 1) * inp];
                    let mut p = 0;
                    for i in 0..out {
                        let row = &w[i * inp..(i + 1) * inp];
                        locked.clear();
                        while p < sites.len() && sites[p].neuron == i {
                            locked.push((p, sites[p].input));
                            p += 1;
                        }
                        let acc = if locked.is_empty() {
                            dot(x, row)
                        } else {
                            dot_locked(x, row, &locked, |pos, s| wrap.product(l, pos, r, &sites[pos], s))
                        };
                        next[r * out + i] = acc + T::from_f32(b[i]);
                    }
                }
                next
            }
            Layer::Relu => cur.into_iter().map(|v| if v > T::ZERO { v } else { T::ZERO }).collect(),
            Layer::Softmax => {
                let mut out = cur;
                for r in 0..rows {
                    T::softmax_in_place(&mut out[r * width..(r + 1) * width]);
                }
                out
            }
        };
        width = width_after(model, l, width);
        for (pos, site) in plan.nonlin[l].iter().enumerate() {
            for r in 0..rows {
                let idx = r * width + site.neuron;
                cur[idx] = wrap.nonlin(l, pos, r, site, cur[idx]);
            }
        }
    }
    cur
}

/// Softmax support for the generic engine.
pub(crate) trait Exp: Sized {
    fn softmax_in_place(row: &mut [Self]);
}

impl Exp for f32 {
    fn softmax_in_place(row: &mut [f32]) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl Exp for f64 {
    fn softmax_in_place(row: &mut [f64]) {
        let soft = softmax_row(row);
        row.copy_from_slice(&soft);
    }
}

/// Full hard or unlocked pass from `start` to the logits.
pub(crate) fn run_f32(model: &VictimModel, start: usize, input: Vec<f32>, rows: usize, key: Option<u32>) -> Vec<f32> {
    let end = model.layers.len();
    match key {
        None => run(model, start, end, input, rows, &mut NoLock, None),
        Some(code) => run(model, start, end, input, rows, &mut HardLock { model, code }, None),
    }
}

/// Unlocked pass through layers `0..end`.
pub(crate) fn run_prefix_f32(model: &VictimModel, end: usize, input: Vec<f32>, rows: usize) -> Vec<f32> {
    run(model, 0, end, input, rows, &mut NoLock, None)
}

/// Activations entering the first bound layer. Everything before that layer
/// is key-independent, so searches evaluate keys from here.
#[derive(Clone, Debug)]
pub struct PrefixCache {
    start: usize,
    width: usize,
    rows: usize,
    data: Vec<f32>,
}

impl PrefixCache {
    pub fn build(model: &VictimModel, batch: &Tensor) -> Result<Self> {
        model.check_batch(batch)?;
        let start = model.first_bound_layer().unwrap_or(model.layers.len());
        let rows = batch.rows();
        let data = run(model, 0, start, batch.data().to_vec(), rows, &mut NoLock, None);
        let width = data.len().checked_div(rows).unwrap_or(0);
        Ok(PrefixCache {
            start,
            width,
            rows,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn start_layer(&self) -> usize {
        self.start
    }

    fn gather<T: Real>(&self, idx: &[usize]) -> Vec<T> {
        let mut out = Vec::with_capacity(idx.len() * self.width);
        for &i in idx {
            out.extend(self.data[i * self.width..(i + 1) * self.width].iter().map(|&v| T::from_f32(v)));
        }
        out
    }

    /// Hard or unlocked logits for the selected samples.
    pub fn hard_logits(&self, model: &VictimModel, idx: &[usize], key: Option<u32>) -> Vec<f32> {
        run_f32(model, self.start, self.gather(idx), idx.len(), key)
    }
}

/// Unlocked logits of every sample plus the codes each lock site observes.
#[derive(Clone, Debug)]
pub struct HardTrace {
    pub logits: Vec<f32>,
    /// Sorted, deduplicated codes per sample.
    pub codes: Vec<Vec<u32>>,
}

impl HardTrace {
    /// A sample whose unlocked trace never quantizes into the window of a key
    /// produces exactly its unlocked logits under that key.
    pub fn build(model: &VictimModel, prefix: &PrefixCache) -> Self {
        let mut rec = CodeRecorder {
            model,
            codes: vec![Vec::new(); prefix.rows],
        };
        let all: Vec<usize> = (0..prefix.rows).collect();
        let logits = run(model, prefix.start, model.layers.len(), prefix.gather(&all), prefix.rows, &mut rec, None);
        let mut codes = rec.codes;
        for c in &mut codes {
            c.sort_unstable();
            c.dedup();
        }
        HardTrace { logits, codes }
    }
}

/// Relaxed-key logits for the selected samples.
pub(crate) fn soft_logits(model: &VictimModel, prefix: &PrefixCache, idx: &[usize], soft: &SoftKey) -> Vec<f64> {
    let mut tape = SoftTape::new(model, *soft, idx.len());
    run(model, prefix.start, model.layers.len(), prefix.gather(idx), idx.len(), &mut tape, None)
}

/// Mean cross-entropy under the relaxed key and, when `need_grad`, its
/// reverse-mode derivative with respect to kappa. `labels[i]` belongs to
/// sample `idx[i]`.
pub(crate) fn soft_loss_grad(
    model: &VictimModel,
    prefix: &PrefixCache,
    idx: &[usize],
    labels: &[usize],
    soft: &SoftKey,
    need_grad: bool,
) -> (f64, f64) {
    let (loss, parts) = soft_loss_grad_parts(model, prefix, idx, labels, soft, need_grad);
    (loss, parts.iter().sum())
}

/// As [`soft_loss_grad`], with the kappa derivative split per binding.
pub(crate) fn soft_loss_grad_parts(
    model: &VictimModel,
    prefix: &PrefixCache,
    idx: &[usize],
    labels: &[usize],
    soft: &SoftKey,
    need_grad: bool,
) -> (f64, Vec<f64>) {
    let rows = idx.len();
    let end = model.layers.len();
    let mut tape = SoftTape::new(model, *soft, rows);
    let mut inputs = Vec::new();
    let logits = run(
        model,
        prefix.start,
        end,
        prefix.gather(idx),
        rows,
        &mut tape,
        need_grad.then_some(&mut inputs),
    );
    let classes = model.class_count();
    let mut losses = Vec::with_capacity(rows);
    let mut adj = vec![0.0f64; rows * classes];
    let scale = 1.0 / rows as f64;
    for r in 0..rows {
        let row = &logits[r * classes..(r + 1) * classes];
        losses.push(cross_entropy(row, labels[r]));
        if need_grad {
            let p = softmax_row(row);
            for c in 0..classes {
                adj[r * classes + c] = (p[c] - if c == labels[r] { 1.0 } else { 0.0 }) * scale;
            }
        }
    }
    let loss = mean(&losses);
    if !need_grad {
        return (loss, vec![0.0; model.bindings().len()]);
    }
    (loss, backward_kappa(model, prefix.start, &inputs, &tape, adj, rows))
}

fn backward_kappa(
    model: &VictimModel,
    start: usize,
    inputs: &[Vec<f64>],
    tape: &SoftTape<'_>,
    mut adj: Vec<f64>,
    rows: usize,
) -> Vec<f64> {
    let plan = model.plan();
    let mut d_kappa = vec![0.0f64; model.bindings().len()];
    for l in (start..model.layers.len()).rev() {
        let input = &inputs[l - start];
        let in_width = input.len().checked_div(rows).unwrap_or(0);
        let out_width = width_after(model, l, in_width);
        for (pos, site) in plan.nonlin[l].iter().enumerate() {
            for r in 0..rows {
                let e = tape.nonlin[l][pos * rows + r];
                let a = &mut adj[r * out_width + site.neuron];
                d_kappa[site.binding] += *a * e.d_dkappa;
                *a *= e.d_dx;
            }
        }
        let need_dx = l > start;
        adj = match &model.layers[l] {
            Layer::Relu => {
                if !need_dx {
                    break;
                }
                adj.iter()
                    .zip(input)
                    .map(|(&a, &x)| if x > 0.0 { a } else { 0.0 })
                    .collect()
            }
            Layer::Softmax => {
                if !need_dx {
                    break;
                }
                let mut dx = vec![0.0; adj.len()];
                for r in 0..rows {
                    let y = softmax_row(&input[r * in_width..(r + 1) * in_width]);
                    let a = &adj[r * in_width..(r + 1) * in_width];
                    let dotp: f64 = a.iter().zip(&y).map(|(a, y)| a * y).sum();
                    for c in 0..in_width {
                        dx[r * in_width + c] = y[c] * (a[c] - dotp);
                    }
                }
                dx
            }
            Layer::Dense { weights, .. } => {
                let w = weights.data();
                let sites = &plan.products[l];
                for r in 0..rows {
                    for (pos, site) in sites.iter().enumerate() {
                        let e = tape.products[l][r * sites.len() + pos];
                        d_kappa[site.binding] += adj[r * out_width + site.neuron] * e.d_dkappa;
                    }
                }
                if !need_dx {
                    break;
                }
                let mut dx = vec![0.0f64; rows * in_width];
                for r in 0..rows {
                    let dxr = &mut dx[r * in_width..(r + 1) * in_width];
                    for i in 0..out_width {
                        let a = adj[r * out_width + i];
                        if a == 0.0 {
                            continue;
                        }
                        for (d, &wv) in dxr.iter_mut().zip(&w[i * in_width..(i + 1) * in_width]) {
                            *d += a * f64::from(wv);
                        }
                    }
                    for (pos, site) in sites.iter().enumerate() {
                        let e = tape.products[l][r * sites.len() + pos];
                        let a = adj[r * out_width + site.neuron];
                        dxr[site.input] += a * (e.d_dx - 1.0) * f64::from(w[site.neuron * in_width + site.input]);
                    }
                }
                dx
            }
        };
    }
    d_kappa
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn cross_entropy(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    lse - (row[label] - max)
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
