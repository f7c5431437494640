use std::collections::HashMap;
use std::sync::Mutex;

use super::{make_pseudo_labels, LossPopulation, ScenarioSpec};
use crate::data::Dataset;
use crate::locking::{PointLockScheme, SoftKey};
use crate::net::{cross_entropy, soft_loss_grad, HardTrace, PrefixCache, VictimModel};
use crate::{Error, Result};

/// Everything a search needs to price keys on one dataset: pseudo-labels,
/// the key-independent prefix activations and the unlocked lock-site trace.
///
/// Hard losses are exact. A key only changes the logits of samples whose
/// unlocked trace hits its window, so only those are re-evaluated; the result
/// equals the mean cross-entropy of a full hard-key forward pass bit for bit.
pub struct AttackContext<'a> {
    model: &'a VictimModel,
    scheme: PointLockScheme,
    spec: ScenarioSpec,
    /// Dataset rows that enter the loss, in order.
    population: Vec<usize>,
    labels: Vec<usize>,
    prefix: PrefixCache,
    baseline: Vec<f64>,
    /// `(code, population position)` pairs, sorted.
    hits: Vec<(u32, usize)>,
    memo: Mutex<HashMap<u32, f64>>,
}

impl<'a> AttackContext<'a> {
    pub fn new(model: &'a VictimModel, data: &Dataset, spec: &ScenarioSpec) -> Result<Self> {
        let scheme = model
            .scheme()
            .cloned()
            .ok_or_else(|| Error::Attack("the model has no lock bindings".into()))?;
        if data.class_count() != model.class_count() {
            return Err(Error::Input(format!(
                "dataset has {} classes, model has {}",
                data.class_count(),
                model.class_count()
            )));
        }
        spec.validate(model.class_count())?;
        let trigger = spec.trigger_class;
        let trigger_count = data.labels().iter().filter(|&&y| y == trigger).count();
        if trigger_count == 0 {
            return Err(Error::Attack(format!("no samples of trigger class {trigger}")));
        }
        if trigger_count == data.len() {
            return Err(Error::Attack(format!(
                "every sample is of trigger class {trigger}; the attack needs other classes"
            )));
        }
        let pseudo = make_pseudo_labels(data.labels(), spec, model.class_count())?;
        let population: Vec<usize> = match spec.loss_population {
            LossPopulation::All => (0..data.len()).collect(),
            LossPopulation::TriggerOnly => (0..data.len()).filter(|&i| data.labels()[i] == trigger).collect(),
        };
        let labels: Vec<usize> = population.iter().map(|&i| pseudo[i]).collect();
        let prefix = PrefixCache::build(model, data.features())?;
        let trace = HardTrace::build(model, &prefix);
        let classes = model.class_count();
        let baseline = population
            .iter()
            .zip(&labels)
            .map(|(&i, &y)| {
                let row: Vec<f64> = trace.logits[i * classes..(i + 1) * classes]
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                cross_entropy(&row, y)
            })
            .collect();
        let mut hits: Vec<(u32, usize)> = population
            .iter()
            .enumerate()
            .flat_map(|(p, &i)| trace.codes[i].iter().map(move |&c| (c, p)))
            .collect();
        hits.sort_unstable();
        Ok(AttackContext {
            model,
            scheme,
            spec: spec.clone(),
            population,
            labels,
            prefix,
            baseline,
            hits,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn scheme(&self) -> &PointLockScheme {
        &self.scheme
    }

    /// Number of samples in the loss.
    pub fn population(&self) -> usize {
        self.population.len()
    }

    /// Labels the loss is measured against, aligned with the population.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn positions_hit(&self, lo: u32, hi: u32, out: &mut Vec<usize>) {
        let start = self.hits.partition_point(|&(c, _)| c < lo);
        let end = self.hits.partition_point(|&(c, _)| c <= hi);
        out.extend(self.hits[start..end].iter().map(|&(_, p)| p));
    }

    /// Mean attack loss over the population under hard key `code`.
    pub fn hard_loss(&self, code: u32) -> f64 {
        if let Some(&v) = self.memo.lock().expect("memo lock").get(&code) {
            return v;
        }
        let value = self.compute_hard_loss(code);
        self.memo.lock().expect("memo lock").insert(code, value);
        value
    }

    fn compute_hard_loss(&self, code: u32) -> f64 {
        let mut losses = self.baseline.clone();
        if code != self.scheme.correct_key {
            let codes = self.scheme.code_count();
            let last = code + self.scheme.window_width - 1;
            let mut affected = Vec::new();
            if last < codes {
                self.positions_hit(code, last, &mut affected);
            } else {
                self.positions_hit(code, codes - 1, &mut affected);
                self.positions_hit(0, last - codes, &mut affected);
            }
            affected.sort_unstable();
            affected.dedup();
            let rows: Vec<usize> = affected.iter().map(|&p| self.population[p]).collect();
            let logits = self.prefix.hard_logits(self.model, &rows, Some(code));
            let classes = self.model.class_count();
            for (r, &p) in affected.iter().enumerate() {
                let row: Vec<f64> = logits[r * classes..(r + 1) * classes]
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                losses[p] = cross_entropy(&row, self.labels[p]);
            }
        }
        losses.iter().sum::<f64>() / losses.len() as f64
    }

    fn batch(&self, positions: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let rows = positions.iter().map(|&p| self.population[p]).collect();
        let labels = positions.iter().map(|&p| self.labels[p]).collect();
        (rows, labels)
    }

    /// Relaxed loss and its kappa derivative on a minibatch of population
    /// positions.
    pub fn soft_loss_grad(&self, positions: &[usize], soft: &SoftKey) -> (f64, f64) {
        let (rows, labels) = self.batch(positions);
        soft_loss_grad(self.model, &self.prefix, &rows, &labels, soft, true)
    }

    /// Relaxed loss only, as observed by a black-box attacker.
    pub fn soft_loss(&self, positions: &[usize], soft: &SoftKey) -> f64 {
        let (rows, labels) = self.batch(positions);
        soft_loss_grad(self.model, &self.prefix, &rows, &labels, soft, false).0
    }
}
