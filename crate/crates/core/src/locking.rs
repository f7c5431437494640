//! Value-level model of a point-function locked hardware neuron.
//!
//! A locked neuron passes its activation through a comparator working on a
//! fixed-point code of the value. Under the correct key the comparator is
//! transparent. Under a wrong key `k`, activations whose code falls into the
//! window `W(k) = {k, k+1, ..., k+w-1} (mod 2^n)` are corrupted, so each wrong
//! key corrupts exactly `w` of the `2^n` codes.
//!
//! The discrete key is not differentiable, so the search works on a
//! [`SoftKey`]: a Gaussian bump of width `sigma` centred at a continuous key
//! location `kappa` that blends the activation toward the corrupted value.
//! [`harden`] maps a trained `kappa` back to a discrete wrong key.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest supported key width. Codes are stored in `u32`.
pub const MAX_KEY_WIDTH_BITS: u32 = 24;

/// What a corrupted activation becomes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// Force the activation to the top of the quantization range.
    #[default]
    SaturateHigh,
    /// Force the activation to zero.
    ForceZero,
    /// Add a fixed offset to the activation.
    AdditiveOffset { delta: f64 },
}

/// Parametrization of the wrong-key corruption function `g(x; k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointLockScheme {
    pub key_width_bits: u32,
    #[serde(default = "default_window_width")]
    pub window_width: u32,
    pub correct_key: u32,
    pub quant_lo: f32,
    pub quant_hi: f32,
    #[serde(default)]
    pub corruption_mode: CorruptionMode,
}

fn default_window_width() -> u32 {
    1
}

impl PointLockScheme {
    pub fn new(key_width_bits: u32, correct_key: u32, quant_lo: f32, quant_hi: f32) -> Result<Self> {
        let scheme = PointLockScheme {
            key_width_bits,
            window_width: 1,
            correct_key,
            quant_lo,
            quant_hi,
            corruption_mode: CorruptionMode::SaturateHigh,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn with_window(mut self, window_width: u32) -> Result<Self> {
        self.window_width = window_width;
        self.validate()?;
        Ok(self)
    }

    pub fn with_mode(mut self, mode: CorruptionMode) -> Result<Self> {
        self.corruption_mode = mode;
        self.validate()?;
        Ok(self)
    }

    /// Number of distinct key codes, `2^n`.
    pub fn code_count(&self) -> u32 {
        1u32 << self.key_width_bits
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.key_width_bits;
        if !(2..=MAX_KEY_WIDTH_BITS).contains(&n) {
            return Err(Error::Config(format!(
                "key_width_bits must be in [2, {MAX_KEY_WIDTH_BITS}], got {n}"
            )));
        }
        let codes = self.code_count();
        if self.window_width == 0 || self.window_width >= codes {
            return Err(Error::Config(format!(
                "window_width must be in [1, {codes}), got {}",
                self.window_width
            )));
        }
        if self.correct_key >= codes {
            return Err(Error::Config(format!(
                "correct_key {} out of range for a {n}-bit key",
                self.correct_key
            )));
        }
        if !(self.quant_lo.is_finite() && self.quant_hi.is_finite() && self.quant_lo < self.quant_hi) {
            return Err(Error::Config(format!(
                "quantization range must satisfy quant_lo < quant_hi, got [{}, {}]",
                self.quant_lo, self.quant_hi
            )));
        }
        if let CorruptionMode::AdditiveOffset { delta } = self.corruption_mode {
            if !delta.is_finite() {
                return Err(Error::Config("additive offset must be finite".into()));
            }
        }
        Ok(())
    }

    /// Codes per unit of activation.
    fn code_scale(&self) -> f64 {
        f64::from(self.code_count()) / (f64::from(self.quant_hi) - f64::from(self.quant_lo))
    }

    /// Unclamped real-valued quantization coordinate, `(x - lo) / (hi - lo) * 2^n`.
    pub fn raw_coordinate(&self, x: f64) -> f64 {
        (x - f64::from(self.quant_lo)) * self.code_scale()
    }

    /// Coordinate used by the soft relaxation: the raw coordinate shifted so
    /// that the window of key `c` is centred on `c`.
    pub fn soft_coordinate(&self, x: f64) -> f64 {
        self.raw_coordinate(x) - f64::from(self.window_width) / 2.0
    }

    /// Whether `code` lies in the corruption window opened by `key_code`.
    /// Says nothing about the correct key, which opens no window.
    pub fn window_contains(&self, key_code: u32, code: u32) -> bool {
        let mask = self.code_count() - 1;
        (code.wrapping_sub(key_code) & mask) < self.window_width
    }

    fn corrupt_f32(&self, x: f32) -> f32 {
        match self.corruption_mode {
            CorruptionMode::SaturateHigh => self.quant_hi,
            CorruptionMode::ForceZero => 0.0,
            CorruptionMode::AdditiveOffset { delta } => x + delta as f32,
        }
    }

    /// `(target(x), d target / dx)` for the soft relaxation.
    fn corrupt_f64(&self, x: f64) -> (f64, f64) {
        match self.corruption_mode {
            CorruptionMode::SaturateHigh => (f64::from(self.quant_hi), 0.0),
            CorruptionMode::ForceZero => (0.0, 0.0),
            CorruptionMode::AdditiveOffset { delta } => (x + delta, 1.0),
        }
    }

    /// Hard lock without the width check; callers validate once up front.
    #[inline]
    pub(crate) fn apply_hard_code(&self, x: f32, key_code: u32) -> f32 {
        if key_code == self.correct_key {
            return x;
        }
        if self.window_contains(key_code, quantize(x, self)) {
            self.corrupt_f32(x)
        } else {
            x
        }
    }
}

/// A discrete locking key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyVector {
    pub code: u32,
    pub width_bits: u32,
}

impl KeyVector {
    pub fn new(code: u32, width_bits: u32) -> Result<Self> {
        if width_bits == 0 || width_bits > MAX_KEY_WIDTH_BITS || code >= (1u32 << width_bits) {
            return Err(Error::Config(format!(
                "key code {code} does not fit in {width_bits} bits"
            )));
        }
        Ok(KeyVector { code, width_bits })
    }

    pub fn correct(scheme: &PointLockScheme) -> Self {
        KeyVector {
            code: scheme.correct_key,
            width_bits: scheme.key_width_bits,
        }
    }
}

/// Continuous relaxation of a key used during search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftKey {
    /// Key location in code units; unconstrained while optimizing.
    pub kappa: f64,
    /// Bump width in code units.
    pub sigma: f64,
    /// Peak blend weight, in (0, 1].
    pub amplitude: f64,
}

impl SoftKey {
    pub fn new(kappa: f64, sigma: f64) -> Self {
        SoftKey {
            kappa,
            sigma,
            amplitude: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.amplitude > 0.0 && self.amplitude <= 1.0) {
            return Err(Error::Config(format!(
                "amplitude must be in (0, 1], got {}",
                self.amplitude
            )));
        }
        if !self.kappa.is_finite() {
            return Err(Error::Config("kappa must be finite".into()));
        }
        Ok(())
    }
}

/// Saturating fixed-point code of an activation.
pub fn quantize(x: f32, scheme: &PointLockScheme) -> u32 {
    let max = f64::from(scheme.code_count() - 1);
    let code = scheme.raw_coordinate(f64::from(x)).floor();
    // NaN maps to 0 through the clamp below.
    if code.is_nan() {
        return 0;
    }
    code.clamp(0.0, max) as u32
}

/// Discrete-key locking function `g(x; k)`.
pub fn apply_lock_hard(x: f32, key: KeyVector, scheme: &PointLockScheme) -> Result<f32> {
    check_width(key, scheme)?;
    Ok(scheme.apply_hard_code(x, key.code))
}

fn check_width(key: KeyVector, scheme: &PointLockScheme) -> Result<()> {
    if key.width_bits != scheme.key_width_bits {
        return Err(Error::Config(format!(
            "key width {} does not match scheme key width {}",
            key.width_bits, scheme.key_width_bits
        )));
    }
    Ok(())
}

/// Value and partial derivatives of the soft lock at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftLockEval {
    pub value: f64,
    pub d_dx: f64,
    pub d_dkappa: f64,
}

/// Smooth surrogate of [`apply_lock_hard`]:
/// `x + a * b(x, kappa) * (target(x) - x)` with a Gaussian bump `b`.
pub fn apply_lock_soft(x: f64, soft: &SoftKey, scheme: &PointLockScheme) -> f64 {
    soft_lock_eval(x, soft, scheme).value
}

pub fn soft_lock_eval(x: f64, soft: &SoftKey, scheme: &PointLockScheme) -> SoftLockEval {
    let offset = scheme.soft_coordinate(x) - soft.kappa;
    let inv_var = 1.0 / (soft.sigma * soft.sigma);
    let bump = (-0.5 * offset * offset * inv_var).exp();
    let blend = soft.amplitude * bump;
    let (target, d_target) = scheme.corrupt_f64(x);
    // Written as a lerp so that blend == 1 yields the target exactly and
    // blend == 0 yields x exactly.
    let value = x * (1.0 - blend) + target * blend;
    let d_blend_dkappa = blend * offset * inv_var;
    let d_blend_dx = -d_blend_dkappa * scheme.code_scale();
    SoftLockEval {
        value,
        d_dx: (1.0 - blend) + blend * d_target + (target - x) * d_blend_dx,
        d_dkappa: (target - x) * d_blend_dkappa,
    }
}

/// Codes corrupted by `key`; empty for the correct key.
pub fn corruption_set(scheme: &PointLockScheme, key: KeyVector) -> BTreeSet<u32> {
    if key.code == scheme.correct_key {
        return BTreeSet::new();
    }
    let mask = scheme.code_count() - 1;
    (0..scheme.window_width)
        .map(|i| key.code.wrapping_add(i) & mask)
        .collect()
}

/// Nearest discrete code to `kappa` (ties to even), wrapped into `[0, 2^n)`.
pub fn nearest_code(kappa: f64, scheme: &PointLockScheme) -> u32 {
    let modulus = f64::from(scheme.code_count());
    kappa.round_ties_even().rem_euclid(modulus) as u32
}

/// Map a relaxed key back to a discrete wrong key.
///
/// If the nearest code is the correct key, the neighbour at distance one with
/// the lower `loss` is returned instead (ties to the smaller code).
pub fn harden(
    soft: &SoftKey,
    scheme: &PointLockScheme,
    mut loss: impl FnMut(KeyVector) -> f64,
) -> KeyVector {
    let width_bits = scheme.key_width_bits;
    let code = nearest_code(soft.kappa, scheme);
    if code != scheme.correct_key {
        return KeyVector { code, width_bits };
    }
    let mask = scheme.code_count() - 1;
    let down = KeyVector {
        code: code.wrapping_sub(1) & mask,
        width_bits,
    };
    let up = KeyVector {
        code: code.wrapping_add(1) & mask,
        width_bits,
    };
    let (l_down, l_up) = (loss(down), loss(up));
    match l_down.total_cmp(&l_up) {
        std::cmp::Ordering::Less => down,
        std::cmp::Ordering::Greater => up,
        std::cmp::Ordering::Equal => down.min(up),
    }
}

/// Result of the exhaustive error-rate enumeration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorRateReport {
    pub codes: u32,
    pub window_width: u32,
    pub wrong_keys_checked: u32,
    pub min_corrupted: u32,
    pub max_corrupted: u32,
    pub correct_key_corrupted: u32,
}

/// Enumerate every key against every code through [`apply_lock_hard`] and
/// confirm that each wrong key corrupts exactly `w < 2^n` codes and the
/// correct key none. Works on unvalidated schemes so broken ones are caught.
pub fn verify_error_rate(scheme: &PointLockScheme) -> std::result::Result<ErrorRateReport, String> {
    let n = scheme.key_width_bits;
    if !(2..=12).contains(&n) {
        return Err(format!("exhaustive enumeration needs 2 <= n <= 12, got {n}"));
    }
    if !(scheme.quant_lo < scheme.quant_hi) {
        return Err("quant_lo must be below quant_hi".into());
    }
    let codes = 1u32 << n;
    let step = (f64::from(scheme.quant_hi) - f64::from(scheme.quant_lo)) / f64::from(codes);
    // A representative activation at the centre of every code; SaturateHigh
    // uses a marker value so corruption is visible even at the top code.
    let probe = PointLockScheme {
        corruption_mode: match scheme.corruption_mode {
            CorruptionMode::SaturateHigh => CorruptionMode::AdditiveOffset { delta: 1.0e3 },
            other => other,
        },
        ..scheme.clone()
    };
    let centers: Vec<f32> = (0..codes)
        .map(|c| (f64::from(scheme.quant_lo) + (f64::from(c) + 0.5) * step) as f32)
        .collect();
    let count = |key_code: u32| -> u32 {
        centers
            .iter()
            .filter(|&&x| {
                let y = probe.apply_hard_code(x, key_code);
                y.to_bits() != x.to_bits()
            })
            .count() as u32
    };
    let mut report = ErrorRateReport {
        codes,
        window_width: scheme.window_width,
        wrong_keys_checked: 0,
        min_corrupted: u32::MAX,
        max_corrupted: 0,
        correct_key_corrupted: 0,
    };
    for key in 0..codes {
        let corrupted = count(key);
        if key == scheme.correct_key {
            report.correct_key_corrupted = corrupted;
            continue;
        }
        report.wrong_keys_checked += 1;
        report.min_corrupted = report.min_corrupted.min(corrupted);
        report.max_corrupted = report.max_corrupted.max(corrupted);
    }
    if report.correct_key_corrupted != 0 {
        return Err(format!(
            "correct key corrupts {} codes",
            report.correct_key_corrupted
        ));
    }
    if report.min_corrupted != scheme.window_width || report.max_corrupted != scheme.window_width {
        return Err(format!(
            "wrong keys corrupt between {} and {} codes, expected exactly {}",
            report.min_corrupted, report.max_corrupted, scheme.window_width
        ));
    }
    if report.max_corrupted >= codes {
        return Err(format!(
            "wrong keys corrupt all {codes} codes; the error rate must stay below 1"
        ));
    }
    Ok(report)
}

/// Quantization range from the `[lo_pct, hi_pct]` percentiles (in percent)
/// of observed activations, with linear interpolation between order statistics.
pub fn calibrate_range(values: &[f32], lo_pct: f64, hi_pct: f64) -> Result<(f32, f32)> {
    if values.is_empty() {
        return Err(Error::Input("cannot calibrate on an empty activation set".into()));
    }
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::Config(format!(
            "invalid calibration percentiles [{lo_pct}, {hi_pct}]"
        )));
    }
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let pick = |pct: f64| -> f32 {
        let pos = pct / 100.0 * (sorted.len() - 1) as f64;
        let below = pos.floor() as usize;
        let above = pos.ceil() as usize;
        let frac = pos - below as f64;
        (f64::from(sorted[below]) * (1.0 - frac) + f64::from(sorted[above]) * frac) as f32
    };
    let lo = pick(lo_pct);
    let mut hi = pick(hi_pct);
    if hi <= lo {
        hi = *sorted.last().unwrap();
    }
    if hi <= lo {
        return Err(Error::Input(format!(
            "degenerate activation range: every calibration value equals {lo}"
        )));
    }
    Ok((lo, hi))
}
