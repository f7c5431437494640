use rand::Rng;
use serde::Serialize;

use super::ScenarioConfig;
use crate::attack::{AttackContext, ScenarioSpec};
use crate::data::{gen_blobs, split, train_victim, TrainConfig};
use crate::eval::{lock_model, LockSetup};
use crate::locking::{verify_error_rate, CorruptionMode, KeyVector, PointLockScheme, SoftKey};
use crate::net::{finite_diff_grad, forward, grad_kappa, KeyMode, Tensor};
use crate::rng;
use crate::Result;

const SELFTEST_SEED: u64 = 11;
const GRADIENT_CASES: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        self.checks
            .iter()
            .map(|c| format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
            .collect()
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }
}

/// Internal consistency checks on a small synthetic victim. With a config,
/// the error-rate check uses its key width and window instead of the
/// built-in grid; the config is not otherwise validated.
pub fn cmd_selftest(config: Option<&ScenarioConfig>) -> Result<SelftestReport> {
    let mut report = SelftestReport::default();

    let grid: Vec<(u32, u32, CorruptionMode)> = match config {
        Some(c) => vec![(c.lock.setup.key_width_bits, c.lock.setup.window_width, c.lock.setup.corruption_mode)],
        None => [1, 2, 4].map(|w| (8, w, CorruptionMode::SaturateHigh)).to_vec(),
    };
    for (n, w, mode) in grid {
        // Built field by field so invalid widths reach the check.
        let scheme = PointLockScheme {
            key_width_bits: n,
            window_width: w,
            correct_key: 0,
            quant_lo: 0.0,
            quant_hi: 1.0,
            corruption_mode: mode,
        };
        let name = format!("error-rate n={n} w={w}");
        match verify_error_rate(&scheme) {
            Ok(r) => report.push(
                name,
                true,
                format!("{} wrong keys each corrupt {} of {} codes", r.wrong_keys_checked, r.max_corrupted, r.codes),
            ),
            Err(e) => report.push(name, false, e),
        }
    }

    let data = gen_blobs(SELFTEST_SEED, 4, 8, 50, 0.1)?;
    let (train, _) = split(&data, 0.25, SELFTEST_SEED)?;
    let victim = train_victim(
        &train,
        &TrainConfig {
            hidden_sizes: vec![16],
            epochs: 20,
            seed: SELFTEST_SEED,
            ..TrainConfig::default()
        },
    )?;
    let setup = LockSetup {
        correct_key: Some(100),
        ..LockSetup::default()
    };
    let locked = lock_model(&victim, &train, &setup, &[2, 9], SELFTEST_SEED)?;
    let scheme = locked.scheme().expect("bound").clone();

    let mut r = rng::derived(SELFTEST_SEED, 0);
    let rows = 2000;
    let probe: Vec<f32> = (0..rows * train.dim()).map(|_| r.random_range(-1.0..2.0)).collect();
    let probe = Tensor::new(vec![rows, train.dim()], probe)?;
    let plain = forward(&victim, &probe, &KeyMode::Unlocked)?;
    let keyed = forward(&locked, &probe, &KeyMode::Hard(KeyVector::correct(&scheme)))?;
    let mismatched = plain
        .data()
        .iter()
        .zip(keyed.data())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    report.push(
        "transparency",
        mismatched == 0,
        format!("{mismatched} of {} logits differ under the correct key", plain.data().len()),
    );

    let batch = train.head(32);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < GRADIENT_CASES {
        let soft = SoftKey::new(
            r.random_range(0.0..f64::from(scheme.code_count())),
            r.random_range(1.0..8.0),
        );
        let (_, g) = grad_kappa(&locked, batch.features(), batch.labels(), &soft)?;
        if g.abs() < 1e-6 {
            continue;
        }
        let fd = finite_diff_grad(&locked, batch.features(), batch.labels(), &soft, 1e-4)?;
        worst = worst.max((g - fd).abs() / g.abs());
        cases += 1;
    }
    report.push(
        "gradient",
        worst <= 1e-3,
        format!("worst relative error {worst:.3e} over {GRADIENT_CASES} cases"),
    );

    let spec = ScenarioSpec {
        epochs: 8,
        restarts: 3,
        batch_size: 32,
        seed: SELFTEST_SEED,
        ..ScenarioSpec::default()
    };
    let ctx = AttackContext::new(&locked, &train, &spec)?;
    let found = ctx.search()?;
    let refined = ctx.refine_discrete(found.trojan_key, 4)?;
    let (_, best) = ctx.brute_force_best_key(scheme.key_width_bits)?;
    let refined_loss = ctx.hard_loss(refined.code);
    report.push(
        "oracle sandwich",
        best <= refined_loss && refined_loss <= found.loss && found.loss <= found.init_loss,
        format!(
            "brute force {best:.6} <= refined {refined_loss:.6} <= search {:.6} <= init {:.6}",
            found.loss, found.init_loss
        ),
    );
    Ok(report)
}
