//! Pulse-programmable synaptic device model.
//!
//! A device stores a conductance `g` in `[g_min, g_max]`, normalized to a
//! dimensionless weight `w = g (w_max - w_min) / (g_max - g_min)`. Identical
//! programming pulses move the weight along exponential potentiation (LTP) or
//! depression (LTD) curves whose curvature is set by the nonlinearity factor
//! `theta` (small = strongly nonlinear, 100 = essentially linear).
//!
//! The SRAM bitline model and the logarithmic ADC transfer ("MAC
//! nonlinearity") live here too because they are per-device physics as far as
//! the crossbar is concerned.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THETA_MIN: f64 = 0.01;
pub const THETA_MAX: f64 = 100.0;

/// Which curve of the device a quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Ltp,
    Ltd,
}

/// Parameters of one synaptic device technology.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    pub g_max: f64,
    pub g_min: f64,
    pub w_max: f64,
    pub w_min: f64,
    pub theta_ltp: f64,
    pub theta_ltd: f64,
    pub p_max: u64,
}

impl DeviceParams {
    /// Builds parameters with `w_min` derived from the ON/OFF ratio
    /// (`w_min = w_max * g_min / g_max`).
    pub fn new(
        g_max: f64,
        g_min: f64,
        w_max: f64,
        theta_ltp: f64,
        theta_ltd: f64,
        p_max: u64,
    ) -> Result<Self> {
        let p = DeviceParams {
            g_max,
            g_min,
            w_max,
            w_min: w_max * (g_min / g_max),
            theta_ltp,
            theta_ltd,
            p_max,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.g_min > 0.0 && self.g_max > self.g_min) {
            errs.push(format!(
                "require g_max > g_min > 0, got g_max={:e} g_min={:e}",
                self.g_max, self.g_min
            ));
        }
        if !(self.w_max > self.w_min) {
            errs.push(format!(
                "require w_max > w_min, got w_max={} w_min={}",
                self.w_max, self.w_min
            ));
        }
        for (name, t) in [("theta_ltp", self.theta_ltp), ("theta_ltd", self.theta_ltd)] {
            if !(THETA_MIN..=THETA_MAX).contains(&t) {
                errs.push(format!("{name}={t} outside [{THETA_MIN}, {THETA_MAX}]"));
            }
        }
        if self.p_max < 1 {
            errs.push("p_max must be >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Domain(errs.join("; ")))
        }
    }

    pub fn theta(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Ltp => self.theta_ltp,
            Branch::Ltd => self.theta_ltd,
        }
    }

    /// Width of the weight window, `w_max - w_min`.
    pub fn weight_range(&self) -> f64 {
        self.w_max - self.w_min
    }

    /// Inverse of [`weight_from_conductance`] without range checks.
    pub fn conductance_from_weight(&self, w: f64) -> f64 {
        w * (self.g_max - self.g_min) / self.weight_range()
    }

    /// [`weight_from_conductance`] with clamping instead of a range check.
    pub fn weight_of(&self, g: f64) -> f64 {
        (g * self.weight_range() / (self.g_max - self.g_min)).clamp(self.w_min, self.w_max)
    }
}

/// Normalizes a conductance to a weight. The result is clamped to
/// `[w_min, w_max]`; the formula lands a few ulps above `w_max` at `g_max`.
pub fn weight_from_conductance(g: f64, p: &DeviceParams) -> Result<f64> {
    if !(p.g_min..=p.g_max).contains(&g) {
        return Err(Error::domain(format!(
            "conductance {g:e} S outside [{:e}, {:e}]",
            p.g_min, p.g_max
        )));
    }
    Ok(p.weight_of(g))
}

/// `alpha = theta * p_max`.
pub fn alpha(theta: f64, p_max: u64) -> f64 {
    theta * p_max as f64
}

/// Scale factor that pins each curve's endpoints to `w_min` and `w_max`.
pub fn beta(p: &DeviceParams, branch: Branch) -> f64 {
    let a = alpha(p.theta(branch), p.p_max);
    p.weight_range() / -(-(p.p_max as f64) / a).exp_m1()
}

fn check_pulses(pulses: u64, p: &DeviceParams) -> Result<()> {
    if pulses > p.p_max {
        return Err(Error::domain(format!(
            "pulse count {pulses} outside [0, {}]",
            p.p_max
        )));
    }
    Ok(())
}

/// Weight after `pulses` potentiation pulses from the fully reset state.
pub fn ltp_weight(pulses: u64, p: &DeviceParams) -> Result<f64> {
    check_pulses(pulses, p)?;
    Ok(ltp_weight_at(pulses as f64, p))
}

/// Weight after `depression_pulses` depression pulses from the fully set state.
pub fn ltd_weight(depression_pulses: u64, p: &DeviceParams) -> Result<f64> {
    check_pulses(depression_pulses, p)?;
    Ok(ltd_weight_at(depression_pulses as f64, p))
}

/// LTP curve at a real-valued pulse position.
pub(crate) fn ltp_weight_at(pulses: f64, p: &DeviceParams) -> f64 {
    if pulses >= p.p_max as f64 {
        return p.w_max;
    }
    let a = alpha(p.theta_ltp, p.p_max);
    let w = beta(p, Branch::Ltp) * -(-pulses / a).exp_m1() + p.w_min;
    w.clamp(p.w_min, p.w_max)
}

/// LTD curve at a real-valued depression-pulse position.
pub(crate) fn ltd_weight_at(depression: f64, p: &DeviceParams) -> f64 {
    if depression >= p.p_max as f64 {
        return p.w_min;
    }
    let a = alpha(p.theta_ltd, p.p_max);
    let w = beta(p, Branch::Ltd) * (-depression / a).exp_m1() + p.w_max;
    w.clamp(p.w_min, p.w_max)
}

/// Distance `w_max - ltp_weight(P)` computed without cancellation, so that
/// it stays strictly decreasing even where the weight itself has saturated
/// in double precision.
pub fn ltp_headroom(pulses: u64, p: &DeviceParams) -> Result<f64> {
    check_pulses(pulses, p)?;
    let a = alpha(p.theta_ltp, p.p_max);
    let pm = p.p_max as f64;
    Ok(beta(p, Branch::Ltp) * ((-(pulses as f64) / a).exp() - (-pm / a).exp()))
}

/// Continuous LTP pulse position that yields weight `w`.
pub(crate) fn ltp_position(w: f64, p: &DeviceParams) -> f64 {
    let a = alpha(p.theta_ltp, p.p_max);
    let x = 1.0 - (w - p.w_min) / beta(p, Branch::Ltp);
    if x <= 0.0 {
        return p.p_max as f64;
    }
    (-a * x.ln()).clamp(0.0, p.p_max as f64)
}

/// Continuous LTD depression-pulse position that yields weight `w`.
pub(crate) fn ltd_position(w: f64, p: &DeviceParams) -> f64 {
    let a = alpha(p.theta_ltd, p.p_max);
    let x = 1.0 - (p.w_max - w) / beta(p, Branch::Ltd);
    if x <= 0.0 {
        return p.p_max as f64;
    }
    (-a * x.ln()).clamp(0.0, p.p_max as f64)
}

/// Number of potentiation pulses (from reset) that best reaches `w_target`.
///
/// Rounds to the nearest integer. Saturates at `p_max` when the logarithm's
/// argument is not positive.
pub fn pulses_for_weight(w_target: f64, p: &DeviceParams) -> Result<u64> {
    let tol = 1e-12 * p.w_max.abs().max(1.0);
    if !(w_target >= p.w_min - tol && w_target <= p.w_max + tol) {
        return Err(Error::domain(format!(
            "target weight {w_target} outside [{}, {}]",
            p.w_min, p.w_max
        )));
    }
    Ok(pulses_for_weight_clamped(w_target, p))
}

pub(crate) fn pulses_for_weight_clamped(w_target: f64, p: &DeviceParams) -> u64 {
    let a = alpha(p.theta_ltp, p.p_max);
    let arg = 1.0 - (w_target - p.w_min) / beta(p, Branch::Ltp);
    if arg <= 0.0 {
        return p.p_max;
    }
    let raw = -a * arg.ln();
    if raw <= 0.0 {
        return 0;
    }
    // round half away from zero, matching the nearest-integer operator
    let r = raw.round();
    if r >= p.p_max as f64 {
        p.p_max
    } else {
        r as u64
    }
}

/// Conductance reached by `pulses` SET pulses from `g_min` (the SET step of
/// the reset-and-set write).
pub fn conductance_after_set(pulses: u64, p: &DeviceParams) -> f64 {
    let pulses = pulses.min(p.p_max);
    if pulses == p.p_max {
        return p.g_max;
    }
    let a = alpha(p.theta_ltp, p.p_max);
    let scale = (p.g_max - p.g_min) / -(-(p.p_max as f64) / a).exp_m1();
    (scale * -(-(pulses as f64) / a).exp_m1() + p.g_min).clamp(p.g_min, p.g_max)
}

/// Least-squares fit of `theta_ltp` to a measured (pulse, weight) trace by
/// golden-section search over `log(theta)` in `[0.01, 100]`.
pub fn fit_theta_ltp(trace: &[(u64, f64)], p: &DeviceParams) -> Result<f64> {
    if trace.is_empty() {
        return Err(Error::domain("empty trace"));
    }
    if let Some(&(bad, _)) = trace.iter().find(|(n, _)| *n > p.p_max) {
        return Err(Error::domain(format!("trace pulse {bad} exceeds p_max")));
    }
    let sse = |log_theta: f64| {
        let q = DeviceParams {
            theta_ltp: log_theta.exp(),
            ..*p
        };
        trace
            .iter()
            .map(|&(n, w)| {
                let d = ltp_weight_at(n as f64, &q) - w;
                d * d
            })
            .sum::<f64>()
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (THETA_MIN.ln(), THETA_MAX.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (sse(c), sse(d));
    while (b - a).abs() > 1e-10 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = sse(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = sse(d);
        }
    }
    Ok(((a + b) / 2.0).exp())
}

/// SRAM bitline / ADC parameters for the MAC-nonlinearity model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SramAdcParams {
    pub theta_sram: f64,
    pub adc_bits: u32,
    pub v_min: f64,
    pub v_max: f64,
}

impl SramAdcParams {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.v_min >= 0.0 && self.v_max > self.v_min) {
            errs.push(format!(
                "require v_max > v_min >= 0, got v_min={} v_max={}",
                self.v_min, self.v_max
            ));
        }
        if !(1..=16).contains(&self.adc_bits) {
            errs.push(format!("adc_bits={} outside [1, 16]", self.adc_bits));
        }
        if !(self.theta_sram > 0.0) {
            errs.push(format!("theta_sram={} must be > 0", self.theta_sram));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Domain(errs.join("; ")))
        }
    }

    fn half_scale(&self) -> f64 {
        (1u64 << (self.adc_bits - 1)) as f64
    }

    pub fn alpha(&self) -> f64 {
        self.theta_sram * self.half_scale()
    }

    pub fn beta(&self) -> f64 {
        (1.0 - self.v_min / self.v_max) / -(-self.half_scale() / self.alpha()).exp_m1()
    }

    /// Largest output code, `2^bits - 1`.
    pub fn max_code(&self) -> u32 {
        ((1u64 << self.adc_bits) - 1) as u32
    }

    /// Unrounded transfer `-alpha ln S` and its derivative with respect to `v`.
    /// Returns `None` where `S == 0`.
    pub fn transfer(&self, v: f64) -> Option<(f64, f64)> {
        let b = self.beta();
        let x = v / self.v_max - self.v_min / self.v_max;
        let s = (x - b).abs() / b;
        if s == 0.0 {
            return None;
        }
        let y = -self.alpha() * s.ln();
        // dS/dv = sign(x - b) / (b v_max); x < b on [v_min, v_max]
        let dy = self.alpha() / ((b - x) * self.v_max);
        Some((y, dy))
    }
}

/// Digital code produced by the nonlinear ADC for bitline voltage `v`.
pub fn mac_nlop(v: f64, s: &SramAdcParams) -> Result<u32> {
    if !(s.v_min..=s.v_max).contains(&v) {
        return Err(Error::domain(format!(
            "bitline voltage {v} V outside [{}, {}]",
            s.v_min, s.v_max
        )));
    }
    Ok(match s.transfer(v) {
        None => s.max_code(),
        Some((y, _)) => y.round().clamp(0.0, s.max_code() as f64) as u32,
    })
}

/// Ideal SRAM read-bitline discharge: one `unit_drop` for every cell whose
/// stored bit and input bit are both 1.
pub fn bitline_voltage_drop(weight_bits: &[bool], input_bits: &[bool], unit_drop: f64) -> Result<f64> {
    if weight_bits.len() != input_bits.len() {
        return Err(Error::domain(format!(
            "weight/input length mismatch: {} vs {}",
            weight_bits.len(),
            input_bits.len()
        )));
    }
    if !(unit_drop > 0.0) {
        return Err(Error::domain(format!("unit_drop {unit_drop} must be > 0")));
    }
    let active = weight_bits
        .iter()
        .zip(input_bits)
        .filter(|(w, x)| **w && **x)
        .count();
    Ok(active as f64 * unit_drop)
}

/// A named device technology as shipped in the preset file. `w_min` and
/// `p_max` may be left out; they are then derived from the ON/OFF ratio and
/// the crossbar bit precision respectively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DevicePreset {
    pub g_max: f64,
    pub g_min: f64,
    #[serde(default = "one")]
    pub w_max: f64,
    #[serde(default)]
    pub w_min: Option<f64>,
    pub theta_ltp: f64,
    pub theta_ltd: f64,
    #[serde(default)]
    pub p_max: Option<u64>,
    #[serde(default)]
    pub technology: Option<String>,
    #[serde(default)]
    pub material: Option<String>,
}

fn one() -> f64 {
    1.0
}

impl DevicePreset {
    /// Resolves to concrete parameters. `default_p_max` is used when the
    /// preset does not pin the pulse budget.
    pub fn resolve(&self, default_p_max: u64) -> Result<DeviceParams> {
        let p = DeviceParams {
            g_max: self.g_max,
            g_min: self.g_min,
            w_max: self.w_max,
            w_min: self.w_min.unwrap_or(self.w_max * self.g_min / self.g_max),
            theta_ltp: self.theta_ltp,
            theta_ltd: self.theta_ltd,
            p_max: self.p_max.unwrap_or(default_p_max),
        };
        p.validate()?;
        Ok(p)
    }
}

const BUILTIN_PRESETS: &str = include_str!("../presets/devices.json");

/// Presets shipped with the crate, keyed by name.
pub fn builtin_presets() -> BTreeMap<String, DevicePreset> {
    serde_json::from_str(BUILTIN_PRESETS).expect("bundled device presets are valid JSON")
}

/// Loads a preset file (a JSON object of name -> preset).
pub fn load_presets(path: &std::path::Path) -> Result<BTreeMap<String, DevicePreset>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
}

pub fn builtin_preset(name: &str) -> Option<DevicePreset> {
    builtin_presets().remove(name)
}

/// Default pulse budget for bit precision `b`: `2^(b+1) - 2`.
pub fn default_p_max(bits: u32) -> u64 {
    (1u64 << (bits + 1)) - 2
}
