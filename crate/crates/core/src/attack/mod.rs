//! Trojan-key search.
//!
//! The pipeline follows the attacker's view of a locked accelerator:
//!
//! 1. model the locked neuron as `g(x; k)` ([`crate::locking`]),
//! 2. treat the key as the only trainable parameter, weights frozen,
//! 3. build pseudo-labels for the trigger class ([`make_pseudo_labels`]),
//! 4. minimise the cross-entropy against those labels over the relaxed key
//!    and harden the result to a wrong key ([`search_trojan_key`]).
//!
//! [`brute_force_best_key`] and [`refine_discrete`] give exhaustive and local
//! discrete references, and [`zeroth_order_search`] replaces back-propagation
//! with finite differences of the observed loss.

mod evaluator;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::locking::{harden, KeyVector, PointLockScheme, SoftKey};
use crate::net::VictimModel;
use crate::rng::{self, stream};
use crate::{Error, Result};

pub use evaluator::AttackContext;

/// Default refusal threshold for exhaustive key enumeration.
pub const DEFAULT_BRUTE_FORCE_LIMIT: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Trigger samples get a random wrong class each.
    Untargeted,
    /// Trigger samples are all relabelled to `target_class`.
    Targeted { target_class: usize },
}

/// Which samples enter the attack loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPopulation {
    /// Trigger samples with pseudo-labels plus every other sample with its
    /// true label, so collateral damage is penalised.
    #[default]
    All,
    TriggerOnly,
}

/// Update rule for the relaxed key.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `kappa -= lr * g`.
    Sgd,
    /// Adam with the usual moment decays; steps are about `lr` codes long
    /// whatever the gradient scale.
    #[default]
    Adam,
}

/// One attack instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub trigger_class: usize,
    pub mode: AttackMode,
    /// Step size in code units.
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(sigma_start, sigma_end)`, annealed geometrically across epochs.
    pub sigma_schedule: (f64, f64),
    pub restarts: usize,
    pub seed: u64,
    pub loss_population: LossPopulation,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            trigger_class: 1,
            mode: AttackMode::Untargeted,
            learning_rate: 0.5,
            optimizer: Optimizer::Adam,
            epochs: 30,
            batch_size: 64,
            sigma_schedule: (8.0, 0.5),
            restarts: 8,
            seed: 0,
            loss_population: LossPopulation::All,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.trigger_class >= class_count {
            return Err(Error::Config(format!(
                "trigger class {} out of range for {class_count} classes",
                self.trigger_class
            )));
        }
        if let AttackMode::Targeted { target_class } = self.mode {
            if target_class >= class_count || target_class == self.trigger_class {
                return Err(Error::Config(format!(
                    "target class {target_class} must be a valid class other than the trigger"
                )));
            }
        }
        let (start, end) = self.sigma_schedule;
        if !(end > 0.0 && start >= end && start.is_finite()) {
            return Err(Error::Config(format!(
                "sigma schedule must satisfy sigma_start >= sigma_end > 0, got ({start}, {end})"
            )));
        }
        if self.restarts == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("restarts, epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Bump width for `epoch`.
    pub fn sigma_at(&self, epoch: usize) -> f64 {
        let (start, end) = self.sigma_schedule;
        if self.epochs <= 1 {
            return start;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        start * (end / start).powf(t)
    }
}

/// Outcome of a key search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrojanKeyResult {
    pub trojan_key: KeyVector,
    pub key_width_bits: u32,
    /// Attack loss of `trojan_key` on the search population.
    pub loss: f64,
    /// Attack loss of the hardened starting point of the winning trajectory.
    pub init_loss: f64,
    pub final_kappa: f64,
    /// `(step, best hard-key loss so far)` at every epoch boundary, taken
    /// as the minimum over restarts.
    pub loss_trace: Vec<(usize, f64)>,
    /// Percentile position among all wrong keys (lower is better), when an
    /// exhaustive comparison was run.
    pub brute_force_rank: Option<f64>,
    /// Number of distinct wrong keys whose hard loss the search evaluated.
    pub keys_evaluated: usize,
    pub seed: u64,
    pub spec: ScenarioSpec,
}

/// Replace trigger-class labels according to the attack mode. Other labels
/// are returned unchanged. Deterministic in `spec.seed`.
pub fn make_pseudo_labels(labels: &[usize], spec: &ScenarioSpec, class_count: usize) -> Result<Vec<usize>> {
    spec.validate(class_count)?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
        return Err(Error::Input(format!("label {bad} out of range for {class_count} classes")));
    }
    let mut rng = rng::derived(spec.seed, stream::PSEUDO_LABELS);
    let trigger = spec.trigger_class;
    Ok(labels
        .iter()
        .map(|&y| {
            if y != trigger {
                return y;
            }
            match spec.mode {
                AttackMode::Targeted { target_class } => target_class,
                AttackMode::Untargeted => {
                    let draw = rng.random_range(0..class_count - 1);
                    if draw >= trigger {
                        draw + 1
                    } else {
                        draw
                    }
                }
            }
        })
        .collect())
}

/// How a trajectory obtains the slope of the relaxed loss in kappa.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slope {
    Backprop,
    /// Central difference with step `0.1 * sigma`.
    FiniteDifference,
}

struct Trajectory {
    trace: Vec<(usize, f64)>,
    final_kappa: f64,
    init: (f64, u32),
    evaluated: BTreeMap<u32, f64>,
}

fn run_trajectory(ctx: &AttackContext<'_>, restart: usize, slope: Slope) -> Trajectory {
    let spec = ctx.spec();
    let scheme = ctx.scheme().clone();
    let mut rng = rng::derived(spec.seed, stream::RESTART_BASE + restart as u64);
    let mut evaluated = BTreeMap::new();
    let eval = |code: u32, evaluated: &mut BTreeMap<u32, f64>| -> f64 {
        let loss = ctx.hard_loss(code);
        evaluated.insert(code, loss);
        loss
    };
    let mut kappa = rng.random_range(0.0..f64::from(scheme.code_count()));
    let harden_at = |kappa: f64, sigma: f64, evaluated: &mut BTreeMap<u32, f64>| -> (f64, u32) {
        let key = harden(&SoftKey::new(kappa, sigma), &scheme, |k| eval(k.code, evaluated));
        (eval(key.code, evaluated), key.code)
    };
    let init = harden_at(kappa, spec.sigma_at(0), &mut evaluated);
    let mut best = init;
    let mut trace = vec![(0, best.0)];
    let mut order: Vec<usize> = (0..ctx.population()).collect();
    let mut step = 0;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    for epoch in 0..spec.epochs {
        let sigma = spec.sigma_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch_size) {
            let soft = SoftKey::new(kappa, sigma);
            let slope_value = match slope {
                Slope::Backprop => ctx.soft_loss_grad(batch, &soft).1,
                Slope::FiniteDifference => {
                    let h = 0.1 * sigma;
                    let at = |k: f64| ctx.soft_loss(batch, &SoftKey::new(k, sigma));
                    (at(kappa + h) - at(kappa - h)) / (2.0 * h)
                }
            };
            step += 1;
            kappa -= spec.learning_rate
                * match spec.optimizer {
                    Optimizer::Sgd => slope_value,
                    Optimizer::Adam => {
                        const B1: f64 = 0.9;
                        const B2: f64 = 0.999;
                        m = B1 * m + (1.0 - B1) * slope_value;
                        v = B2 * v + (1.0 - B2) * slope_value * slope_value;
                        let m_hat = m / (1.0 - B1.powi(step as i32));
                        let v_hat = v / (1.0 - B2.powi(step as i32));
                        m_hat / (v_hat.sqrt() + 1e-12)
                    }
                };
            let candidate = harden_at(kappa, sigma, &mut evaluated);
            if candidate.0.total_cmp(&best.0).then(candidate.1.cmp(&best.1)).is_lt() {
                best = candidate;
            }
        }
        trace.push((step, best.0));
    }
    Trajectory {
        trace,
        final_kappa: kappa,
        init,
        evaluated,
    }
}

fn search(ctx: &AttackContext<'_>, slope: Slope) -> Result<TrojanKeyResult> {
    let spec = ctx.spec();
    let trajectories: Vec<Trajectory> = (0..spec.restarts)
        .into_par_iter()
        .map(|r| run_trajectory(ctx, r, slope))
        .collect();
    // Deterministic reduction over every key any trajectory evaluated.
    let mut evaluated: BTreeMap<u32, f64> = BTreeMap::new();
    for t in &trajectories {
        evaluated.extend(t.evaluated.iter().map(|(&k, &v)| (k, v)));
    }
    let (&code, &loss) = evaluated
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))
        .ok_or_else(|| Error::Attack("search evaluated no keys".into()))?;
    let winner = trajectories
        .iter()
        .find(|t| t.evaluated.contains_key(&code))
        .expect("winning key comes from some trajectory");
    let steps = trajectories[0].trace.len();
    let loss_trace = (0..steps)
        .map(|i| {
            let step = trajectories[0].trace[i].0;
            let best = trajectories.iter().map(|t| t.trace[i].1).fold(f64::INFINITY, f64::min);
            (step, best)
        })
        .collect();
    Ok(TrojanKeyResult {
        trojan_key: KeyVector {
            code,
            width_bits: ctx.scheme().key_width_bits,
        },
        key_width_bits: ctx.scheme().key_width_bits,
        loss,
        init_loss: winner.init.0,
        final_kappa: winner.final_kappa,
        loss_trace,
        brute_force_rank: None,
        keys_evaluated: evaluated.len(),
        seed: spec.seed,
        spec: spec.clone(),
    })
}

/// Gradient search over the relaxed key with restarts, returning the best
/// hardened key seen. The model's weights are never modified.
pub fn search_trojan_key(model: &VictimModel, train: &Dataset, spec: &ScenarioSpec) -> Result<TrojanKeyResult> {
    AttackContext::new(model, train, spec)?.search()
}

/// As [`search_trojan_key`], with the slope estimated from loss
/// observations only.
pub fn zeroth_order_search(model: &VictimModel, train: &Dataset, spec: &ScenarioSpec) -> Result<TrojanKeyResult> {
    AttackContext::new(model, train, spec)?.zeroth_order_search()
}

/// Exhaustive argmin of the attack loss over wrong keys, ties to the
/// smallest code.
pub fn brute_force_best_key(
    model: &VictimModel,
    data: &Dataset,
    spec: &ScenarioSpec,
    width_limit: u32,
) -> Result<(KeyVector, f64)> {
    AttackContext::new(model, data, spec)?.brute_force_best_key(width_limit)
}

/// Greedy best-improvement hill climb over codes within `radius` (wrapping).
pub fn refine_discrete(
    model: &VictimModel,
    data: &Dataset,
    spec: &ScenarioSpec,
    start: KeyVector,
    radius: u32,
) -> Result<KeyVector> {
    AttackContext::new(model, data, spec)?.refine_discrete(start, radius)
}

impl AttackContext<'_> {
    pub fn search(&self) -> Result<TrojanKeyResult> {
        search(self, Slope::Backprop)
    }

    pub fn zeroth_order_search(&self) -> Result<TrojanKeyResult> {
        search(self, Slope::FiniteDifference)
    }

    /// Attack loss of every wrong key, in code order.
    pub fn all_wrong_key_losses(&self, width_limit: u32) -> Result<Vec<(u32, f64)>> {
        let scheme = self.scheme();
        let n = scheme.key_width_bits;
        if n > width_limit {
            return Err(Error::Config(format!(
                "refusing brute force over 2^{n} keys: key width {n} exceeds the limit of {width_limit} bits"
            )));
        }
        Ok((0..scheme.code_count())
            .filter(|&c| c != scheme.correct_key)
            .map(|c| (c, self.hard_loss(c)))
            .collect())
    }

    pub fn brute_force_best_key(&self, width_limit: u32) -> Result<(KeyVector, f64)> {
        let all = self.all_wrong_key_losses(width_limit)?;
        let &(code, loss) = all
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("at least three wrong keys exist");
        Ok((
            KeyVector {
                code,
                width_bits: self.scheme().key_width_bits,
            },
            loss,
        ))
    }

    /// Percentile position of `key` among all wrong keys:
    /// `100 * (1 + #keys with strictly lower loss) / #wrong keys`.
    pub fn brute_force_rank(&self, key: KeyVector, width_limit: u32) -> Result<f64> {
        let all = self.all_wrong_key_losses(width_limit)?;
        let loss = self.hard_loss(key.code);
        let better = all.iter().filter(|(_, l)| *l < loss).count();
        Ok(100.0 * (1 + better) as f64 / all.len() as f64)
    }

    pub fn refine_discrete(&self, start: KeyVector, radius: u32) -> Result<KeyVector> {
        let scheme = self.scheme();
        check_key(scheme, start)?;
        if radius == 0 {
            return Err(Error::Input("refinement radius must be >= 1".into()));
        }
        let codes = scheme.code_count();
        let mask = codes - 1;
        let span = radius.min(codes / 2);
        let mut current = (self.hard_loss(start.code), start.code);
        loop {
            let mut best = current;
            for d in 1..=span {
                for code in [current.1.wrapping_add(d) & mask, current.1.wrapping_sub(d) & mask] {
                    if code == scheme.correct_key {
                        continue;
                    }
                    let cand = (self.hard_loss(code), code);
                    if cand.0.total_cmp(&best.0).then(cand.1.cmp(&best.1)).is_lt() {
                        best = cand;
                    }
                }
            }
            if best.0 < current.0 {
                current = best;
            } else {
                break;
            }
        }
        Ok(KeyVector {
            code: current.1,
            width_bits: scheme.key_width_bits,
        })
    }
}

fn check_key(scheme: &PointLockScheme, key: KeyVector) -> Result<()> {
    if key.width_bits != scheme.key_width_bits || key.code >= scheme.code_count() {
        return Err(Error::Config(format!(
            "key {} ({} bits) does not fit the {}-bit scheme",
            key.code, key.width_bits, scheme.key_width_bits
        )));
    }
    if key.code == scheme.correct_key {
        return Err(Error::Input("refinement must start from a wrong key".into()));
    }
    Ok(())
}
