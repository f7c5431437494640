//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 1 and 4-7 run on MNIST, read from `$TROJANKEY_DATA_DIR` or
//! `data/mnist` at the workspace root (see `scripts/fetch_mnist.sh`).

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use trojankey::attack::{AttackContext, AttackMode, LossPopulation, ScenarioSpec};
use trojankey::cli::{self, Options};
use trojankey::data::{accuracy, load_idx, train_victim, Dataset, TrainConfig};
use trojankey::eval::{
    key_effects, lock_model, mapping_sweep, select_live_neurons, select_neurons, targeted_experiment, untargeted_experiment, LockSetup,
};
use trojankey::locking::{apply_lock_hard, verify_error_rate, CorruptionMode, KeyVector, PointLockScheme};
use trojankey::net::{finite_diff_grad, forward, grad_kappa, KeyMode, Layer, Placement, Tensor, VictimModel};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

struct Mnist {
    train: Dataset,
    test: Dataset,
    victim: VictimModel,
}

fn mnist() -> Result<Mnist, String> {
    let dir = std::env::var_os("TROJANKEY_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let load = |images: &str, labels: &str| {
        load_idx(dir.join(images), dir.join(labels)).map_err(|e| format!("MNIST unavailable ({e})"))
    };
    let train = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let victim = train_victim(&train, &TrainConfig::default()).map_err(|e| e.to_string())?;
    Ok(Mnist { train, test, victim })
}

fn transparency(m: &Mnist) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = 10_000;
    let inputs: Vec<f32> = (0..rows * 784).map(|_| rng.random_range(0.0..1.0)).collect();
    let inputs = Tensor::new(vec![rows, 784], inputs).unwrap();
    let plain = forward(&m.victim, &inputs, &KeyMode::Unlocked).unwrap();
    let setups = [
        (LockSetup::default(), vec![select_neurons(32, 1, 0).unwrap()[0]]),
        (
            LockSetup {
                placement: Placement::Multiplier { input_index: 400 },
                key_width_bits: 6,
                ..LockSetup::default()
            },
            select_neurons(32, 4, 1).unwrap(),
        ),
        (
            LockSetup {
                layer_index: 2,
                window_width: 4,
                corruption_mode: CorruptionMode::ForceZero,
                ..LockSetup::default()
            },
            vec![3, 7],
        ),
    ];
    let mut differing = 0;
    for (setup, neurons) in &setups {
        let locked = lock_model(&m.victim, &m.train, setup, neurons, 0).unwrap();
        let key = KeyVector::correct(locked.scheme().unwrap());
        let keyed = forward(&locked, &inputs, &KeyMode::Hard(key)).unwrap();
        differing += plain
            .data()
            .iter()
            .zip(keyed.data())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
    }
    outcome(
        differing == 0,
        format!("{rows} random inputs, {} lock setups: {differing} logits differ", setups.len()),
    )
}

fn error_rate() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for w in [1u32, 2, 4] {
        for correct in [0u32, 77, 255] {
            let scheme = PointLockScheme::new(8, correct, -1.0, 3.0)
                .unwrap()
                .with_window(w)
                .unwrap()
                .with_mode(CorruptionMode::AdditiveOffset { delta: 0.5 })
                .unwrap();
            // Direct count: one probe at the centre of every code.
            let step = 4.0 / 256.0;
            let centers: Vec<f32> = (0..256).map(|c| -1.0 + (c as f32 + 0.5) * step).collect();
            let counts: Vec<usize> = (0..256u32)
                .map(|k| {
                    let key = KeyVector::new(k, 8).unwrap();
                    centers
                        .iter()
                        .filter(|&&x| apply_lock_hard(x, key, &scheme).unwrap() != x)
                        .count()
                })
                .collect();
            let wrong_exact = (0..256).filter(|&k| k != correct as usize).all(|k| counts[k] == w as usize);
            let pass = wrong_exact && counts[correct as usize] == 0 && verify_error_rate(&scheme).is_ok();
            ok &= pass;
            if correct == 77 {
                lines.push(format!("w={w}: 255 wrong keys corrupt {w}/256, correct key 0"));
            }
        }
    }
    outcome(ok, lines.join("; "))
}

/// A random small MLP with one random binding, calibrated on a random batch.
/// `None` when every sampled site value coincides (a dead site).
fn random_locked_case(rng: &mut ChaCha8Rng) -> Option<(VictimModel, Dataset)> {
    let input = rng.random_range(3..9);
    let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(3..8)).collect();
    let classes = rng.random_range(2..5);
    let mut layers = Vec::new();
    let mut widths = vec![input];
    for &h in hidden.iter().chain([classes].iter()) {
        let inp = *widths.last().unwrap();
        let scale = (2.0 / inp as f32).sqrt();
        let w = (0..h * inp).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let b = (0..h).map(|_| rng.random_range(-0.1..0.1)).collect();
        layers.push(Layer::dense(Tensor::new(vec![h, inp], w).unwrap(), Tensor::new(vec![h], b).unwrap()).unwrap());
        layers.push(Layer::Relu);
        widths.push(h);
    }
    layers.pop();
    let model = VictimModel::new(layers).unwrap();
    let rows = rng.random_range(4..16);
    let x = (0..rows * input).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    let data = Dataset::new(Tensor::new(vec![rows, input], x).unwrap(), labels, classes).unwrap();

    let dense = rng.random_range(0..widths.len() - 1);
    let width = widths[dense + 1];
    let neurons = select_neurons(width, rng.random_range(1..=width.min(3)), rng.random()).unwrap();
    let placement = if rng.random_bool(0.5) {
        Placement::NonLinearity
    } else {
        Placement::Multiplier {
            input_index: rng.random_range(0..widths[dense]),
        }
    };
    let setup = LockSetup {
        layer_index: 2 * dense,
        placement,
        key_width_bits: rng.random_range(4..=8),
        window_width: rng.random_range(1..=3),
        corruption_mode: [
            CorruptionMode::SaturateHigh,
            CorruptionMode::ForceZero,
            CorruptionMode::AdditiveOffset { delta: 0.7 },
        ][rng.random_range(0..3)],
        correct_key: Some(0),
        calibration_percentiles: (0.0, 100.0),
    };
    let locked = lock_model(&model, &data, &setup, &neurons, 0).ok()?;
    Some((locked, data))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut drawn = 0;
    while done < 50 {
        drawn += 1;
        let Some((model, data)) = random_locked_case(&mut rng) else { continue };
        let codes = f64::from(model.scheme().unwrap().code_count());
        let mut live = None;
        for _ in 0..20 {
            let soft = trojankey::locking::SoftKey::new(rng.random_range(-2.0..codes + 2.0), rng.random_range(0.5..6.0));
            let (_, g) = grad_kappa(&model, data.features(), data.labels(), &soft).unwrap();
            if g.abs() >= 1e-6 {
                live = Some((soft, g));
                break;
            }
        }
        let Some((soft, g)) = live else { continue };
        let fd = finite_diff_grad(&model, data.features(), data.labels(), &soft, 1e-4).unwrap();
        worst = worst.max((g - fd).abs() / g.abs());
        done += 1;
    }
    outcome(
        worst <= 1e-3,
        format!("50 random configurations ({drawn} drawn), worst relative error {worst:.2e}"),
    )
}

fn oracle_sandwich(m: &Mnist) -> Outcome {
    let mut good = 0;
    let mut notes = Vec::new();
    for seed in 0..20u64 {
        let neuron = select_live_neurons(&m.victim, &m.train, &LockSetup::default(), 1, seed).unwrap();
        let locked = lock_model(&m.victim, &m.train, &LockSetup::default(), &neuron, seed).unwrap();
        let spec = ScenarioSpec {
            seed,
            ..ScenarioSpec::default()
        };
        let ctx = AttackContext::new(&locked, &m.train, &spec).unwrap();
        let found = ctx.search().unwrap();
        let refined = ctx.hard_loss(ctx.refine_discrete(found.trojan_key, 4).unwrap().code);
        let (_, best) = ctx.brute_force_best_key(8).unwrap();
        let rank = ctx.brute_force_rank(found.trojan_key, 8).unwrap();
        let sandwich = best <= refined && refined <= found.loss;
        if sandwich && rank <= 1.0 {
            good += 1;
        } else {
            notes.push(format!("seed {seed}: rank {rank:.2}, sandwich {sandwich}"));
        }
    }
    outcome(
        good >= 18,
        format!("{good}/20 runs sandwiched and in the best 1%{}", notes.iter().map(|n| format!("; {n}")).collect::<String>()),
    )
}

/// Lowest-index hidden neuron whose training-set key census contains a key
/// with trigger drop >= 30 and mean collateral <= 10. Also returns how many
/// of the 32 neurons qualify.
fn benchmark_neuron(m: &Mnist, trigger: usize) -> (Option<usize>, usize) {
    let qualifying: Vec<usize> = (0..32)
        .into_par_iter()
        .filter(|&n| {
            let locked = lock_model(&m.victim, &m.train, &LockSetup::default(), &[n], 0).unwrap();
            key_effects(&locked, &m.train, trigger, 8)
                .unwrap()
                .iter()
                .any(|e| e.trigger_delta <= -30.0 && e.mean_nontrigger_delta >= -10.0)
        })
        .collect();
    (qualifying.first().copied(), qualifying.len())
}

struct Benchmark {
    trigger: usize,
    neuron: usize,
    locked: VictimModel,
}

fn untargeted(m: &Mnist, benches: &[Benchmark], census: &[(usize, usize)]) -> Outcome {
    let test_accuracy = accuracy(&m.victim, &m.test, &KeyMode::Unlocked).unwrap();
    let mut ok = test_accuracy >= 90.0 && benches.len() == 2;
    let mut parts = vec![format!("victim test accuracy {test_accuracy:.2}%")];
    for (trigger, count) in census {
        parts.push(format!("trigger {trigger}: {count}/32 neurons admit a qualifying key"));
    }
    for b in benches {
        let spec = ScenarioSpec {
            trigger_class: b.trigger,
            loss_population: LossPopulation::TriggerOnly,
            ..ScenarioSpec::default()
        };
        let r = AttackContext::new(&b.locked, &m.train, &spec).unwrap().search().unwrap();
        let rep = untargeted_experiment(&b.locked, &m.test, &r).unwrap();
        let (drop, coll) = (rep.summary.trigger_delta, rep.summary.mean_nontrigger_delta);
        ok &= drop <= -30.0 && coll >= -10.0;
        let all = ScenarioSpec {
            loss_population: LossPopulation::All,
            ..spec
        };
        let r_all = AttackContext::new(&b.locked, &m.train, &all).unwrap().search().unwrap();
        let rep_all = untargeted_experiment(&b.locked, &m.test, &r_all).unwrap();
        parts.push(format!(
            "trigger {} neuron {} key {}: trigger {drop:.1}, non-trigger {coll:.2} (full-population loss: key {}, {:.1}/{:.2})",
            b.trigger,
            b.neuron,
            r.trojan_key.code,
            r_all.trojan_key.code,
            rep_all.summary.trigger_delta,
            rep_all.summary.mean_nontrigger_delta
        ));
    }
    outcome(ok, parts.join("; "))
}

fn targeted(m: &Mnist, benches: &[Benchmark]) -> Outcome {
    let mut ok = benches.len() == 2;
    let mut parts = Vec::new();
    for b in benches {
        let target = if b.trigger == 1 { 9 } else { 0 };
        let spec = ScenarioSpec {
            trigger_class: b.trigger,
            mode: AttackMode::Targeted { target_class: target },
            loss_population: LossPopulation::TriggerOnly,
            ..ScenarioSpec::default()
        };
        let r = AttackContext::new(&b.locked, &m.train, &spec).unwrap().search().unwrap();
        let rep = targeted_experiment(&b.locked, &m.test, &r).unwrap();
        let shift = rep.target_shift.unwrap();
        ok &= shift >= -0.5;
        parts.push(format!(
            "{}->{target}: share {:.2}% -> {:.2}% (shift {shift:+.2})",
            b.trigger, rep.baseline[target], rep.trojan[target]
        ));
    }
    outcome(ok, parts.join("; "))
}

fn sweep(m: &Mnist) -> Outcome {
    let mut collateral = [0.0; 2];
    let mut drop = [0.0; 2];
    for seed in 0..5u64 {
        let spec = ScenarioSpec {
            seed,
            loss_population: LossPopulation::TriggerOnly,
            ..ScenarioSpec::default()
        };
        let rep = mapping_sweep(&m.victim, &m.train, &m.test, &LockSetup::default(), &[1, 2], &spec, seed).unwrap();
        for (i, e) in rep.entries.iter().enumerate() {
            collateral[i] -= e.mean_nontrigger_delta / 5.0;
            drop[i] -= e.trigger_delta / 5.0;
        }
    }
    outcome(
        collateral[1] >= collateral[0] - 2.0,
        format!(
            "means over 5 seeds: m=1 collateral {:.2} (trigger drop {:.1}), m=2 collateral {:.2} (trigger drop {:.1})",
            collateral[0], drop[0], collateral[1], drop[1]
        ),
    )
}

fn determinism(m: Option<&Mnist>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("scenario.toml");
    std::fs::write(
        &config,
        "seed = 4\n[dataset.blobs]\nclasses = 5\ndim = 12\nspread = 0.3\n[attack]\nepochs = 6\nrestarts = 3\nbrute_force = true\n\
         refine_radius = 3\n[eval]\nexperiments = [\"untargeted\", \"targeted\", \"sweep\"]\n",
    )
    .unwrap();
    let opts = Options {
        config: config.clone(),
        ..Options::default()
    };
    let files = ["victim.tknn", "victim_metrics.json", "victim_metrics.txt", "attack_result.json", "attack_result.txt", "eval_report.json", "eval_report.txt"];
    let run = || -> Vec<Vec<u8>> {
        cli::cmd_victim_train(&opts).unwrap();
        cli::cmd_attack(&opts).unwrap();
        cli::cmd_eval(&opts, None).unwrap();
        files.iter().map(|f| std::fs::read(dir.path().join("out").join(f)).unwrap()).collect()
    };
    let first = run();
    let second = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
    let mut identical = first == second;
    let mut detail = format!("{} CLI outputs byte-identical across re-runs and thread counts: {identical}", files.len());
    if let Some(m) = m {
        let locked = lock_model(&m.victim, &m.train, &LockSetup::default(), &[4], 0).unwrap();
        let spec = ScenarioSpec::default();
        let a = AttackContext::new(&locked, &m.train, &spec).unwrap().search().unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(2)
            .build()
            .unwrap()
            .install(|| AttackContext::new(&locked, &m.train, &spec).unwrap().search().unwrap());
        let same = serde_json::to_vec(&a).unwrap() == serde_json::to_vec(&b).unwrap();
        identical &= same;
        detail += &format!("; MNIST result payload identical: {same}");
    }
    outcome(identical, detail)
}

fn main() {
    let started = Instant::now();
    let data = mnist();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let missing = |e: &String| outcome(false, e.clone());

    results.push(("1 correct-key transparency", data.as_ref().map_or_else(missing, transparency)));
    results.push(("2 error-rate exactness", error_rate()));
    results.push(("3 gradient correctness", gradient_check()));
    results.push(("4 oracle sandwich", data.as_ref().map_or_else(missing, oracle_sandwich)));
    match &data {
        Ok(m) => {
            let mut census = Vec::new();
            let mut benches = Vec::new();
            for trigger in [1, 6] {
                let (neuron, count) = benchmark_neuron(m, trigger);
                census.push((trigger, count));
                if let Some(neuron) = neuron {
                    let locked = lock_model(&m.victim, &m.train, &LockSetup::default(), &[neuron], 0).unwrap();
                    benches.push(Benchmark { trigger, neuron, locked });
                }
            }
            results.push(("5 untargeted efficacy", untargeted(m, &benches, &census)));
            results.push(("6 targeted weakness", targeted(m, &benches)));
            results.push(("7 mapping sweep", sweep(m)));
        }
        Err(e) => {
            for name in ["5 untargeted efficacy", "6 targeted weakness", "7 mapping sweep"] {
                results.push((name, missing(e)));
            }
        }
    }
    results.push(("8 determinism", determinism(data.as_ref().ok())));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!(
        "{} of {} criteria passed in {:.0} s",
        results.len() - failed,
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
