//! Experiment runners and their reports.
//!
//! Accuracies are per-class recall in percent on a held-out set, deltas are
//! trojan minus baseline in percentage points. Every report renders as JSON
//! through serde and as aligned text through `to_text`; both carry the same
//! numbers.

use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{search_trojan_key, AttackMode, ScenarioSpec, TrojanKeyResult};
use crate::data::Dataset;
use crate::locking::{calibrate_range, CorruptionMode, KeyVector, PointLockScheme};
use crate::net::{activations, forward, HardTrace, KeyMode, Layer, LockBinding, Placement, PrefixCache, VictimModel};
use crate::rng::{self, stream};
use crate::{Error, Result};

/// Recall of every class in percent; `None` for classes absent from `test`.
pub fn per_class_accuracy(model: &VictimModel, key_mode: &KeyMode, test: &Dataset) -> Result<Vec<Option<f64>>> {
    let predicted = forward(model, test.features(), key_mode)?.argmax_rows();
    let mut hits = vec![0usize; test.class_count()];
    let mut totals = vec![0usize; test.class_count()];
    for (&p, &y) in predicted.iter().zip(test.labels()) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| 100.0 * h as f64 / t as f64))
        .collect())
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: usize,
    pub baseline_accuracy: Option<f64>,
    pub trojan_accuracy: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub trigger_delta: f64,
    /// Mean delta over non-trigger classes present in the test set.
    pub mean_nontrigger_delta: f64,
}

/// Per-class accuracy under the correct and the trojan key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDeltaReport {
    pub trigger_class: usize,
    pub trojan_key: KeyVector,
    pub classes: Vec<ClassDelta>,
    pub summary: DeltaSummary,
}

impl ClassDeltaReport {
    fn build(trigger_class: usize, trojan_key: KeyVector, baseline: &[Option<f64>], trojan: &[Option<f64>]) -> Result<Self> {
        let classes: Vec<ClassDelta> = baseline
            .iter()
            .zip(trojan)
            .enumerate()
            .map(|(class, (&b, &t))| ClassDelta {
                class,
                baseline_accuracy: b,
                trojan_accuracy: t,
                delta: b.zip(t).map(|(b, t)| t - b),
            })
            .collect();
        let trigger_delta = classes[trigger_class]
            .delta
            .ok_or_else(|| Error::Input(format!("trigger class {trigger_class} is absent from the test set")))?;
        let mean_nontrigger_delta = mean_defined(
            classes
                .iter()
                .filter(|c| c.class != trigger_class)
                .map(|c| c.delta),
        )
        .ok_or_else(|| Error::Input("no non-trigger class in the test set".into()))?;
        Ok(ClassDeltaReport {
            trigger_class,
            trojan_key,
            classes,
            summary: DeltaSummary {
                trigger_delta,
                mean_nontrigger_delta,
            },
        })
    }

    /// Deltas and summary recomputed from the stored accuracies agree
    /// exactly with the stored values.
    pub fn is_consistent(&self) -> bool {
        let Ok(again) = Self::build(
            self.trigger_class,
            self.trojan_key,
            &self.classes.iter().map(|c| c.baseline_accuracy).collect::<Vec<_>>(),
            &self.classes.iter().map(|c| c.trojan_accuracy).collect::<Vec<_>>(),
        ) else {
            return false;
        };
        again == *self
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "class-delta report: trigger class {}, trojan key {}\n",
            self.trigger_class, self.trojan_key.code
        );
        let _ = writeln!(out, "{:>5}  {:>20}  {:>20}  {:>20}", "class", "baseline", "trojan", "delta");
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:>5}  {:>20}  {:>20}  {:>20}",
                c.class,
                fmt_opt(c.baseline_accuracy),
                fmt_opt(c.trojan_accuracy),
                fmt_opt(c.delta)
            );
        }
        let _ = writeln!(out, "trigger delta          {}", fmt(self.summary.trigger_delta));
        let _ = writeln!(out, "mean non-trigger delta {}", fmt(self.summary.mean_nontrigger_delta));
        out
    }
}

/// Shares of trigger-class test inputs assigned to each output class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerDistributionReport {
    pub trigger_class: usize,
    pub target_class: Option<usize>,
    pub trojan_key: KeyVector,
    pub trigger_samples: usize,
    /// Percent per output class under the correct key.
    pub baseline: Vec<f64>,
    /// Percent per output class under the trojan key.
    pub trojan: Vec<f64>,
    /// Change of the target class share in percentage points.
    pub target_shift: Option<f64>,
}

impl TriggerDistributionReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "trigger distribution: trigger class {}, target {}, trojan key {}, {} trigger inputs\n",
            self.trigger_class,
            self.target_class.map_or("none".to_string(), |t| t.to_string()),
            self.trojan_key.code,
            self.trigger_samples
        );
        let _ = writeln!(out, "{:>5}  {:>20}  {:>20}", "class", "baseline", "trojan");
        for (c, (b, t)) in self.baseline.iter().zip(&self.trojan).enumerate() {
            let _ = writeln!(out, "{c:>5}  {:>20}  {:>20}", fmt(*b), fmt(*t));
        }
        if let Some(shift) = self.target_shift {
            let _ = writeln!(out, "target share shift {}", fmt(shift));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub m: usize,
    pub neurons: Vec<usize>,
    pub correct_key: u32,
    pub trojan_key: KeyVector,
    pub trigger_delta: f64,
    pub mean_nontrigger_delta: f64,
}

/// Untargeted attack summaries as the number of mapped neurons grows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingSweepReport {
    pub layer_index: usize,
    pub trigger_class: usize,
    pub selection_seed: u64,
    pub entries: Vec<SweepEntry>,
}

impl MappingSweepReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "mapping sweep: layer {}, trigger class {}, selection seed {}\n",
            self.layer_index, self.trigger_class, self.selection_seed
        );
        let _ = writeln!(
            out,
            "{:>3}  {:>20}  {:>20}  {:>20}  neurons",
            "m", "key", "trigger", "mean non-trigger"
        );
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:>3}  {:>20}  {:>20}  {:>20}  {:?}",
                e.m,
                e.trojan_key.code,
                fmt(e.trigger_delta),
                fmt(e.mean_nontrigger_delta),
                e.neurons
            );
        }
        out
    }
}

/// Shortest round-trip form, so text tables carry the JSON values exactly.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".to_string(), fmt)
}

fn trojan_key_of(model: &VictimModel, result: &TrojanKeyResult) -> Result<(PointLockScheme, KeyVector)> {
    let scheme = model
        .scheme()
        .cloned()
        .ok_or_else(|| Error::Attack("the model has no lock bindings".into()))?;
    if result.trojan_key.width_bits != scheme.key_width_bits || result.trojan_key.code >= scheme.code_count() {
        return Err(Error::Config(format!(
            "trojan key {} does not fit the {}-bit scheme",
            result.trojan_key.code, scheme.key_width_bits
        )));
    }
    Ok((scheme, result.trojan_key))
}

/// Per-class accuracy under the correct key versus the trojan key.
pub fn untargeted_experiment(model: &VictimModel, test: &Dataset, result: &TrojanKeyResult) -> Result<ClassDeltaReport> {
    let (scheme, key) = trojan_key_of(model, result)?;
    let baseline = per_class_accuracy(model, &KeyMode::Hard(KeyVector::correct(&scheme)), test)?;
    let trojan = per_class_accuracy(model, &KeyMode::Hard(key), test)?;
    ClassDeltaReport::build(result.spec.trigger_class, key, &baseline, &trojan)
}

/// Output-class distribution of trigger-class test inputs, correct key
/// versus trojan key.
pub fn targeted_experiment(
    model: &VictimModel,
    test: &Dataset,
    result: &TrojanKeyResult,
) -> Result<TriggerDistributionReport> {
    let (scheme, key) = trojan_key_of(model, result)?;
    let trigger = result.spec.trigger_class;
    let idx: Vec<usize> = (0..test.len()).filter(|&i| test.labels()[i] == trigger).collect();
    if idx.is_empty() {
        return Err(Error::Input(format!("no test samples of trigger class {trigger}")));
    }
    let subset = test.subset(&idx);
    let distribution = |mode: KeyMode| -> Result<Vec<f64>> {
        let mut counts = vec![0usize; model.class_count()];
        for p in forward(model, subset.features(), &mode)?.argmax_rows() {
            counts[p] += 1;
        }
        Ok(counts.iter().map(|&c| 100.0 * c as f64 / idx.len() as f64).collect())
    };
    let baseline = distribution(KeyMode::Hard(KeyVector::correct(&scheme)))?;
    let trojan = distribution(KeyMode::Hard(key))?;
    let target_class = match result.spec.mode {
        AttackMode::Targeted { target_class } => Some(target_class),
        AttackMode::Untargeted => None,
    };
    Ok(TriggerDistributionReport {
        trigger_class: trigger,
        target_class,
        trojan_key: key,
        trigger_samples: idx.len(),
        target_shift: target_class.map(|t| trojan[t] - baseline[t]),
        baseline,
        trojan,
    })
}

/// Effect of one wrong key on per-class accuracy over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyEffect {
    pub code: u32,
    pub trigger_delta: f64,
    pub mean_nontrigger_delta: f64,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Class-delta summary of every wrong key, in code order. This is an
/// exhaustive oracle over the key space (refused above `width_limit` bits),
/// used to tell whether any trojan key exists for a lock placement.
pub fn key_effects(model: &VictimModel, data: &Dataset, trigger_class: usize, width_limit: u32) -> Result<Vec<KeyEffect>> {
    let scheme = model
        .scheme()
        .cloned()
        .ok_or_else(|| Error::Attack("the model has no lock bindings".into()))?;
    if scheme.key_width_bits > width_limit {
        return Err(Error::Config(format!(
            "refusing to enumerate 2^{} keys: key width exceeds the limit of {width_limit} bits",
            scheme.key_width_bits
        )));
    }
    let classes = model.class_count();
    if trigger_class >= classes {
        return Err(Error::Config(format!("trigger class {trigger_class} out of range")));
    }
    let prefix = PrefixCache::build(model, data.features())?;
    let trace = HardTrace::build(model, &prefix);
    let labels = data.labels();
    let base: Vec<usize> = (0..data.len())
        .map(|i| argmax(&trace.logits[i * classes..(i + 1) * classes]))
        .collect();
    let totals = data.class_counts();
    let mut base_hits = vec![0i64; classes];
    for (i, &p) in base.iter().enumerate() {
        if p == labels[i] {
            base_hits[p] += 1;
        }
    }
    let mut hits: Vec<(u32, usize)> = trace
        .codes
        .iter()
        .enumerate()
        .flat_map(|(i, codes)| codes.iter().map(move |&c| (c, i)))
        .collect();
    hits.sort_unstable();
    let codes = scheme.code_count();
    let mut effects = Vec::with_capacity(codes as usize - 1);
    for code in (0..codes).filter(|&c| c != scheme.correct_key) {
        let mut affected: Vec<usize> = Vec::new();
        for w in 0..scheme.window_width {
            let c = (code + w) & (codes - 1);
            let lo = hits.partition_point(|&(h, _)| h < c);
            let hi = hits.partition_point(|&(h, _)| h <= c);
            affected.extend(hits[lo..hi].iter().map(|&(_, i)| i));
        }
        affected.sort_unstable();
        affected.dedup();
        let logits = prefix.hard_logits(model, &affected, Some(code));
        let mut change = vec![0i64; classes];
        for (r, &i) in affected.iter().enumerate() {
            let y = labels[i];
            let now = argmax(&logits[r * classes..(r + 1) * classes]) == y;
            let was = base[i] == y;
            change[y] += i64::from(now) - i64::from(was);
        }
        let delta = |c: usize| -> Option<f64> {
            (totals[c] > 0).then(|| {
                let t = totals[c] as f64;
                100.0 * (base_hits[c] + change[c]) as f64 / t - 100.0 * base_hits[c] as f64 / t
            })
        };
        let trigger_delta = delta(trigger_class)
            .ok_or_else(|| Error::Input(format!("no samples of trigger class {trigger_class}")))?;
        let mean_nontrigger_delta = mean_defined((0..classes).filter(|&c| c != trigger_class).map(delta))
            .ok_or_else(|| Error::Input("no non-trigger samples".into()))?;
        effects.push(KeyEffect {
            code,
            trigger_delta,
            mean_nontrigger_delta,
        });
    }
    Ok(effects)
}

/// How to put neurons of a trained model behind the locked hardware neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LockSetup {
    /// Index of the dense layer whose neurons are bound.
    pub layer_index: usize,
    pub placement: Placement,
    pub key_width_bits: u32,
    pub window_width: u32,
    pub corruption_mode: CorruptionMode,
    /// Drawn from the selection seed when absent.
    pub correct_key: Option<u32>,
    /// Percentiles of the observed site values mapped to the quantizer range.
    pub calibration_percentiles: (f64, f64),
}

impl Default for LockSetup {
    fn default() -> Self {
        LockSetup {
            layer_index: 0,
            placement: Placement::NonLinearity,
            key_width_bits: 8,
            window_width: 1,
            corruption_mode: CorruptionMode::SaturateHigh,
            correct_key: None,
            calibration_percentiles: (0.1, 99.9),
        }
    }
}

/// `m` distinct neurons out of `width`, sorted, drawn from `seed`.
pub fn select_neurons(width: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 || m > width {
        return Err(Error::Input(format!("cannot select {m} of {width} neurons")));
    }
    let mut rng = rng::derived(seed, stream::NEURON_SELECT);
    let mut picked = index::sample(&mut rng, width, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// As [`select_neurons`], drawing only among neurons whose lock-site value
/// varies over `calibration`. A neuron that is constant there (a dead ReLU,
/// say) cannot be calibrated and would make the lock inert.
pub fn select_live_neurons(
    model: &VictimModel,
    calibration: &Dataset,
    setup: &LockSetup,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let width = match model.layers().get(setup.layer_index) {
        Some(Layer::Dense { weights, .. }) => weights.shape()[0],
        _ => return Err(Error::Config(format!("layer {} is not a dense layer", setup.layer_index))),
    };
    let all: Vec<usize> = (0..width).collect();
    let values = site_values(model, calibration, setup, &all)?;
    let live: Vec<usize> = all
        .iter()
        .filter(|&&n| {
            let mut column = values.iter().skip(n).step_by(width);
            let first = column.next();
            column.any(|v| Some(v) != first)
        })
        .copied()
        .collect();
    if m == 0 || m > live.len() {
        return Err(Error::Input(format!(
            "cannot select {m} neurons: {} of {width} vary on the calibration data",
            live.len()
        )));
    }
    let mut rng = rng::derived(seed, stream::NEURON_SELECT);
    let mut picked: Vec<usize> = index::sample(&mut rng, live.len(), m).into_iter().map(|i| live[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Values the lock comparator sees for `neurons` on `data`, unlocked.
fn site_values(model: &VictimModel, data: &Dataset, setup: &LockSetup, neurons: &[usize]) -> Result<Vec<f32>> {
    let l = setup.layer_index;
    let Some(Layer::Dense { weights, .. }) = model.layers().get(l) else {
        return Err(Error::Config(format!("layer {l} is not a dense layer")));
    };
    let mut values = Vec::with_capacity(data.len() * neurons.len());
    match setup.placement {
        Placement::NonLinearity => {
            let at = if matches!(model.layers().get(l + 1), Some(Layer::Relu)) { l + 1 } else { l };
            let acts = activations(model, data.features(), at)?;
            for r in 0..acts.rows() {
                values.extend(neurons.iter().map(|&n| acts.row(r)[n]));
            }
        }
        Placement::Multiplier { input_index } => {
            let inp = weights.shape()[1];
            if input_index >= inp {
                return Err(Error::Config(format!(
                    "input index {input_index} out of range for layer {l} with {inp} inputs"
                )));
            }
            let inputs = if l == 0 {
                data.features().clone()
            } else {
                activations(model, data.features(), l - 1)?
            };
            for r in 0..inputs.rows() {
                let x = inputs.row(r)[input_index];
                values.extend(neurons.iter().map(|&n| x * weights.data()[n * inp + input_index]));
            }
        }
    }
    Ok(values)
}

/// Bind `neurons` of `model` under one shared key. The quantizer range is
/// calibrated on the unlocked site values over `calibration`.
pub fn lock_model(
    model: &VictimModel,
    calibration: &Dataset,
    setup: &LockSetup,
    neurons: &[usize],
    seed: u64,
) -> Result<VictimModel> {
    let values = site_values(model, calibration, setup, neurons)?;
    let (lo_pct, hi_pct) = setup.calibration_percentiles;
    let (lo, hi) = calibrate_range(&values, lo_pct, hi_pct)?;
    let codes = 1u64 << setup.key_width_bits.min(32);
    let correct_key = match setup.correct_key {
        Some(k) => k,
        None => rng::derived(seed, stream::CORRECT_KEY).random_range(0..codes) as u32,
    };
    let scheme = PointLockScheme::new(setup.key_width_bits, correct_key, lo, hi)?
        .with_window(setup.window_width)?
        .with_mode(setup.corruption_mode)?;
    model.clone().with_bindings(vec![LockBinding {
        layer_index: setup.layer_index,
        neuron_indices: neurons.to_vec(),
        placement: setup.placement,
        scheme,
    }])
}

/// For each `m`, bind `m` seeded live neurons of one layer under a shared key,
/// rerun the untargeted attack on `train` and summarise on `test`.
pub fn mapping_sweep(
    model: &VictimModel,
    train: &Dataset,
    test: &Dataset,
    setup: &LockSetup,
    m_values: &[usize],
    spec: &ScenarioSpec,
    selection_seed: u64,
) -> Result<MappingSweepReport> {
    if m_values.is_empty() || m_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("m values must be non-empty and strictly increasing".into()));
    }
    if spec.mode != AttackMode::Untargeted {
        return Err(Error::Config("the mapping sweep runs the untargeted attack".into()));
    }
    let entries = m_values
        .par_iter()
        .map(|&m| {
            let neurons = select_live_neurons(model, train, setup, m, selection_seed)?;
            let locked = lock_model(model, train, setup, &neurons, selection_seed)?;
            let result = search_trojan_key(&locked, train, spec)?;
            let report = untargeted_experiment(&locked, test, &result)?;
            Ok(SweepEntry {
                m,
                neurons,
                correct_key: locked.scheme().map_or(0, |s| s.correct_key),
                trojan_key: result.trojan_key,
                trigger_delta: report.summary.trigger_delta,
                mean_nontrigger_delta: report.summary.mean_nontrigger_delta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MappingSweepReport {
        layer_index: setup.layer_index,
        trigger_class: spec.trigger_class,
        selection_seed,
        entries,
    })
}
