//! Synaptic crossbar arrays.
//!
//! An array holds the conductance state of `rows x cols` synapses, each either
//! a pair of devices whose difference is the weight (two-device scheme) or one
//! device measured against a fixed reference column (one-device scheme).
//! All arithmetic happens in normalized weight space; the column currents of
//! the physical array are linear in conductance, so a weight-space matrix
//! product is the same computation without units.
//!
//! Synaptic weight of a two-device cell:
//!
//! ```text
//! w = k * (u(g+) + d2d+ + c2c+  -  u(g-) - d2d- - c2c-),   k = w_max / (w_max - w_min)
//! ```
//!
//! where `u(g)` is the normalized device weight. The gain `k` maps the pair's
//! differential window `w_max - w_min` onto `[-w_max, w_max]`.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::device::{self, DeviceParams, SramAdcParams};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Domain};
use crate::variation::{self, D2DMap, VariationSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// 2D1S: positive and negative device per synapse.
    TwoDevice,
    /// 1D1S: one device plus a shared reference column.
    OneDevice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Erase both devices, then program one with SET pulses.
    ResetAndSet,
    /// Buffer deltas; write only cells whose buffer exceeds a threshold.
    Accumulated,
    /// Pulse count proportional to the delta assuming a linear device.
    Linear,
}

/// Where the authoritative copy of a weight lives during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStorage {
    /// A full-precision master copy is kept digitally; the array is
    /// reprogrammed from its quantized value after every step.
    Shadow,
    /// The array is the only copy; the old weight is read back from the
    /// stored conductances before each write.
    Device,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulateThreshold {
    MeanAbsDelta,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputEncoding {
    /// One read per MAC, input value as pulse amplitude.
    Amplitude,
    /// One read per input bit plane, recombined by shift-and-add.
    BitSerial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdcConfig {
    /// Linear ADC with `bits` of resolution.
    Uniform {
        bits: u32,
        #[serde(default)]
        full_scale: Option<f64>,
    },
    /// SRAM bitline readout with logarithmic MAC nonlinearity.
    Sram {
        theta_sram: f64,
        adc_bits: u32,
        v_min: f64,
        v_max: f64,
        #[serde(default)]
        full_scale: Option<f64>,
    },
}

impl AdcConfig {
    pub fn full_scale(&self) -> Option<f64> {
        match *self {
            AdcConfig::Uniform { full_scale, .. } | AdcConfig::Sram { full_scale, .. } => full_scale,
        }
    }

    pub fn with_full_scale(self, fs: f64) -> Self {
        match self {
            AdcConfig::Uniform { bits, .. } => AdcConfig::Uniform {
                bits,
                full_scale: Some(fs),
            },
            AdcConfig::Sram {
                theta_sram,
                adc_bits,
                v_min,
                v_max,
                ..
            } => AdcConfig::Sram {
                theta_sram,
                adc_bits,
                v_min,
                v_max,
                full_scale: Some(fs),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AdcConfig::Uniform { bits, full_scale } => {
                if !(1..=16).contains(&bits) {
                    return Err(Error::domain(format!("adc bits {bits} outside [1, 16]")));
                }
                check_fs(full_scale)
            }
            AdcConfig::Sram {
                theta_sram,
                adc_bits,
                v_min,
                v_max,
                full_scale,
            } => {
                SramAdcParams {
                    theta_sram,
                    adc_bits,
                    v_min,
                    v_max,
                }
                .validate()?;
                check_fs(full_scale)
            }
        }
    }

    fn max_code(&self) -> f64 {
        match *self {
            AdcConfig::Uniform { bits, .. } => ((1u64 << bits) - 1) as f64,
            AdcConfig::Sram { adc_bits, .. } => ((1u64 << adc_bits) - 1) as f64,
        }
    }

    /// Digitizes one column partial sum and maps the code back to the value
    /// domain assuming a linear converter. Returns the reconstructed value and
    /// the slope of the unrounded transfer (for straight-through gradients).
    pub fn convert(&self, y: f64, full_scale: f64) -> (f64, f64) {
        let u = y / full_scale;
        let max_code = self.max_code();
        let lsb = full_scale / max_code;
        if u <= 0.0 {
            return (0.0, 0.0);
        }
        match *self {
            AdcConfig::Uniform { .. } => {
                if u >= 1.0 {
                    return (full_scale, 0.0);
                }
                ((u * max_code).round() * lsb, 1.0)
            }
            AdcConfig::Sram {
                theta_sram,
                adc_bits,
                v_min,
                v_max,
                ..
            } => {
                let s = SramAdcParams {
                    theta_sram,
                    adc_bits,
                    v_min,
                    v_max,
                };
                let inside = u < 1.0;
                let v = v_min + u.min(1.0) * (v_max - v_min);
                match s.transfer(v) {
                    None => (full_scale, 0.0),
                    Some((c, dc_dv)) => {
                        let code = c.round().clamp(0.0, max_code);
                        let slope = if inside {
                            dc_dv * (v_max - v_min) / full_scale * lsb
                        } else {
                            0.0
                        };
                        (code * lsb, slope)
                    }
                }
            }
        }
    }
}

fn check_fs(fs: Option<f64>) -> Result<()> {
    match fs {
        Some(v) if !(v > 0.0 && v.is_finite()) => {
            Err(Error::domain(format!("adc full_scale {v} must be > 0")))
        }
        _ => Ok(()),
    }
}

/// Settings shared by every array of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossbarConfig {
    pub scheme: Scheme,
    pub bit_precision: u32,
    /// Reference conductance for the one-device scheme. Defaults to
    /// `(g_max - g_min) / 2`.
    pub g_ref: Option<f64>,
    pub update_mode: UpdateMode,
    pub weight_storage: WeightStorage,
    pub accumulate_threshold: AccumulateThreshold,
    pub adc: Option<AdcConfig>,
    pub input_encoding: InputEncoding,
    /// Input resolution for bit-serial encoding.
    pub input_bits: u32,
    pub tile_rows: usize,
    pub tile_cols: usize,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        CrossbarConfig {
            scheme: Scheme::TwoDevice,
            bit_precision: 1,
            g_ref: None,
            update_mode: UpdateMode::ResetAndSet,
            weight_storage: WeightStorage::Shadow,
            accumulate_threshold: AccumulateThreshold::MeanAbsDelta,
            adc: None,
            input_encoding: InputEncoding::Amplitude,
            input_bits: 8,
            tile_rows: 128,
            tile_cols: 128,
        }
    }
}

pub const MAX_BITS: u32 = 32;

impl CrossbarConfig {
    /// Collects every violation, each prefixed with its config key.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if !(1..=MAX_BITS).contains(&self.bit_precision) {
            v.push(format!(
                "{prefix}.bit_precision: {} outside [1, {MAX_BITS}]",
                self.bit_precision
            ));
        }
        if let Some(g) = self.g_ref {
            if !(g > 0.0) {
                v.push(format!("{prefix}.g_ref: {g} must be > 0"));
            }
        }
        if let AccumulateThreshold::Fixed(t) = self.accumulate_threshold {
            if !(t >= 0.0) {
                v.push(format!("{prefix}.accumulate_threshold: {t} must be >= 0"));
            }
        }
        if let Some(adc) = &self.adc {
            if let Err(e) = adc.validate() {
                v.push(format!("{prefix}.adc: {e}"));
            }
        }
        if !(1..=16).contains(&self.input_bits) {
            v.push(format!("{prefix}.input_bits: {} outside [1, 16]", self.input_bits));
        }
        if self.tile_rows == 0 {
            v.push(format!("{prefix}.tile_rows: must be >= 1"));
        }
        if self.tile_cols == 0 {
            v.push(format!("{prefix}.tile_cols: must be >= 1"));
        }
        v
    }
}

/// Uniform weight quantizer for a given scheme and bit precision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    pub bits: u32,
    pub scheme: Scheme,
    pub w_max: f64,
}

impl Quantizer {
    pub fn new(bits: u32, scheme: Scheme, w_max: f64) -> Self {
        Quantizer { bits, scheme, w_max }
    }

    /// Largest representable magnitude.
    pub fn limit(&self) -> f64 {
        match self.scheme {
            Scheme::TwoDevice => self.w_max,
            Scheme::OneDevice => 0.5 * self.w_max,
        }
    }

    /// Spacing between adjacent levels (for `bits > 1`).
    pub fn step(&self) -> f64 {
        let n = ((1u64 << self.bits) - 1) as f64;
        match self.scheme {
            Scheme::TwoDevice => self.w_max / n,
            Scheme::OneDevice => self.w_max / n,
        }
    }

    pub fn quantize(&self, w: f64) -> f64 {
        let lim = self.limit();
        if self.bits == 1 {
            return if w >= 0.0 { lim } else { -lim };
        }
        let step = self.step();
        let w = w.clamp(-lim, lim);
        match self.scheme {
            Scheme::TwoDevice => {
                let k = (w / step + 0.5).floor();
                let kmax = ((1u64 << self.bits) - 1) as f64;
                k.clamp(-kmax, kmax) * step
            }
            Scheme::OneDevice => {
                let kmax = ((1u64 << self.bits) - 1) as f64;
                let k = ((w + lim) / step + 0.5).floor().clamp(0.0, kmax);
                -lim + k * step
            }
        }
    }

    /// Every representable level in ascending order. Only sensible for small
    /// bit counts.
    pub fn levels(&self) -> Vec<f64> {
        assert!(self.bits <= 20, "level enumeration limited to 20 bits");
        let lim = self.limit();
        if self.bits == 1 {
            return vec![-lim, lim];
        }
        let kmax = (1i64 << self.bits) - 1;
        let step = self.step();
        match self.scheme {
            Scheme::TwoDevice => (-kmax..=kmax).map(|k| k as f64 * step).collect(),
            Scheme::OneDevice => (0..=kmax).map(|k| -lim + k as f64 * step).collect(),
        }
    }
}

/// Quantizes a weight to the grid of `bits` / `scheme` with ceiling `w_max`.
pub fn quantize_weight(w: f64, bits: u32, scheme: Scheme, w_max: f64) -> f64 {
    Quantizer::new(bits, scheme, w_max).quantize(w)
}

/// Noise settings an array carries with it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseModel {
    pub c2c: VariationSpec,
    pub c2c_on_read: bool,
    pub c2c_on_write: bool,
    pub d2d: VariationSpec,
}

impl NoiseModel {
    pub fn ideal() -> Self {
        NoiseModel::default()
    }

    fn read_noise(&self) -> Option<&VariationSpec> {
        (self.c2c_on_read && self.c2c.is_enabled()).then_some(&self.c2c)
    }

    fn write_noise(&self) -> Option<&VariationSpec> {
        (self.c2c_on_write && self.c2c.is_enabled()).then_some(&self.c2c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WriteStats {
    /// Cells that went through a write (reset-and-set or pulse train).
    pub cells_written: usize,
    /// Total programming pulses issued.
    pub pulses: u64,
}

impl std::ops::AddAssign for WriteStats {
    fn add_assign(&mut self, o: Self) {
        self.cells_written += o.cells_written;
        self.pulses += o.pulses;
    }
}

/// Result of a batched MAC. `slopes[t]` holds the ADC transfer slope of row
/// tile `t` (batch x cols) when an ADC is configured.
#[derive(Debug, Clone)]
pub struct MacOutput {
    pub y: Array2<f64>,
    pub slopes: Option<Vec<Array2<f64>>>,
}

/// The programmed state of one crossbar.
#[derive(Debug, Clone)]
pub struct SynapseArray {
    rows: usize,
    cols: usize,
    device: DeviceParams,
    config: CrossbarConfig,
    noise: NoiseModel,
    g_pos: Vec<f64>,
    g_neg: Option<Vec<f64>>,
    d2d_pos: D2DMap,
    d2d_neg: Option<D2DMap>,
    g_ref: f64,
    /// Level last programmed per cell; NaN when the state is off-grid.
    levels: Vec<f64>,
    adc_full_scale: Option<f64>,
    seed: u64,
    array_id: u64,
    read_cycles: u64,
    write_cycles: u64,
}

impl SynapseArray {
    /// A freshly reset array (every device at `g_min`).
    pub fn new(
        rows: usize,
        cols: usize,
        device: DeviceParams,
        config: &CrossbarConfig,
        noise: NoiseModel,
        seed: u64,
        array_id: u64,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain(format!("array shape {rows}x{cols} must be non-empty")));
        }
        device.validate()?;
        let errs = config.violations("crossbar");
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        noise.c2c.validate()?;
        noise.d2d.validate()?;
        let g_ref = config.g_ref.unwrap_or(0.5 * (device.g_max - device.g_min));
        if !(g_ref > 0.0 && g_ref <= device.g_max) {
            return Err(Error::domain(format!(
                "g_ref {g_ref:e} must lie in (0, g_max]"
            )));
        }
        let n = rows * cols;
        let two = config.scheme == Scheme::TwoDevice;
        let d2d_pos = variation::sample_d2d(
            (rows, cols),
            &noise.d2d,
            rng::derive_seed(seed, Domain::D2d, &[array_id, 0]),
        )?;
        let d2d_neg = if two {
            Some(variation::sample_d2d(
                (rows, cols),
                &noise.d2d,
                rng::derive_seed(seed, Domain::D2d, &[array_id, 1]),
            )?)
        } else {
            None
        };
        let mut arr = SynapseArray {
            rows,
            cols,
            device,
            config: config.clone(),
            noise,
            g_pos: vec![device.g_min; n],
            g_neg: two.then(|| vec![device.g_min; n]),
            d2d_pos,
            d2d_neg,
            g_ref,
            levels: vec![f64::NAN; n],
            adc_full_scale: config.adc.and_then(|a| a.full_scale()),
            seed,
            array_id,
            read_cycles: 0,
            write_cycles: 0,
        };
        if two {
            arr.levels.iter_mut().for_each(|l| *l = 0.0);
        }
        Ok(arr)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn device(&self) -> &DeviceParams {
        &self.device
    }

    pub fn config(&self) -> &CrossbarConfig {
        &self.config
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn quantizer(&self) -> Quantizer {
        Quantizer::new(self.config.bit_precision, self.config.scheme, self.device.w_max)
    }

    /// Seed the D2D maps and noise streams are derived from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn g_ref(&self) -> f64 {
        self.g_ref
    }

    pub fn g_pos(&self) -> &[f64] {
        &self.g_pos
    }

    pub fn g_neg(&self) -> Option<&[f64]> {
        self.g_neg.as_deref()
    }

    pub fn d2d(&self) -> (&D2DMap, Option<&D2DMap>) {
        (&self.d2d_pos, self.d2d_neg.as_ref())
    }

    pub fn cycles(&self) -> (u64, u64) {
        (self.read_cycles, self.write_cycles)
    }

    pub fn adc_full_scale(&self) -> Option<f64> {
        self.adc_full_scale
    }

    pub fn set_adc(&mut self, adc: Option<AdcConfig>) {
        self.config.adc = adc;
        self.adc_full_scale = adc.and_then(|a| a.full_scale());
    }

    pub fn set_adc_full_scale(&mut self, fs: f64) {
        self.adc_full_scale = Some(fs);
    }

    /// Swaps in a different noise model. D2D maps are redrawn from `seed`,
    /// which models moving the programmed state onto a different chip.
    pub fn set_noise(&mut self, noise: NoiseModel, seed: u64) -> Result<()> {
        noise.c2c.validate()?;
        noise.d2d.validate()?;
        self.d2d_pos = variation::sample_d2d(
            (self.rows, self.cols),
            &noise.d2d,
            rng::derive_seed(seed, Domain::D2d, &[self.array_id, 0]),
        )?;
        if self.g_neg.is_some() {
            self.d2d_neg = Some(variation::sample_d2d(
                (self.rows, self.cols),
                &noise.d2d,
                rng::derive_seed(seed, Domain::D2d, &[self.array_id, 1]),
            )?);
        }
        self.noise = noise;
        self.seed = seed;
        Ok(())
    }

    /// Gain from device-weight difference to synaptic weight.
    fn gain(&self) -> f64 {
        self.device.w_max / self.device.weight_range()
    }

    fn u_ref(&self) -> f64 {
        self.g_ref * self.device.weight_range() / (self.device.g_max - self.device.g_min)
    }

    /// Device weight a cell's device must hold to represent level `q`.
    /// Returns `(positive target, negative target)` in device-weight units;
    /// `None` means "leave at reset".
    fn device_targets(&self, q: f64) -> (Option<f64>, Option<f64>) {
        let p = &self.device;
        let k = self.gain();
        match self.config.scheme {
            Scheme::TwoDevice => {
                if q > 0.0 {
                    (Some((p.w_min + q / k).min(p.w_max)), None)
                } else if q < 0.0 {
                    (None, Some((p.w_min - q / k).min(p.w_max)))
                } else {
                    (None, None)
                }
            }
            Scheme::OneDevice => (Some((self.u_ref() + q / k).clamp(p.w_min, p.w_max)), None),
        }
    }

    /// Noise-free synaptic weights implied by the stored conductances. This
    /// is what a controller knows about the array without reading it.
    pub fn stored_weights(&self) -> Array2<f64> {
        let p = self.device;
        let k = self.gain();
        let mut out = Array2::<f64>::zeros((self.rows, self.cols));
        let buf = out.as_slice_mut().expect("standard layout");
        match &self.g_neg {
            Some(gn) => {
                for ((o, &gp), &gn) in buf.iter_mut().zip(&self.g_pos).zip(gn) {
                    *o = k * (p.weight_of(gp) - p.weight_of(gn));
                }
            }
            None => {
                let ur = self.u_ref();
                for (o, &g) in buf.iter_mut().zip(&self.g_pos) {
                    *o = k * (p.weight_of(g) - ur);
                }
            }
        }
        out
    }

    /// Effective weights seen by one READ cycle: stored value plus frozen
    /// D2D offsets plus a fresh C2C draw per device.
    pub fn read_weights(&mut self) -> Array2<f64> {
        let cycle = self.read_cycles;
        self.read_cycles += 1;
        let p = self.device;
        let k = self.gain();
        let ur = self.u_ref();
        let cols = self.cols;
        let read_noise = self.noise.read_noise().copied();
        let (seed, id) = (self.seed, self.array_id);
        let g_pos = &self.g_pos;
        let g_neg = self.g_neg.as_deref();
        let d_pos = self.d2d_pos.offsets();
        let d_neg = self.d2d_neg.as_ref().map(|m| m.offsets());
        let mut out = Array2::<f64>::zeros((self.rows, self.cols));
        par::for_each_chunk_mut(
            out.as_slice_mut().expect("standard layout"),
            cols,
            |r, row| {
                let base = r * cols;
                let mut rng_p = read_noise.map(|_| rng::stream(seed, Domain::ReadNoise, &[id, cycle, 0, r as u64]));
                let mut rng_n = read_noise.map(|_| rng::stream(seed, Domain::ReadNoise, &[id, cycle, 1, r as u64]));
                for (c, o) in row.iter_mut().enumerate() {
                    let i = base + c;
                    let mut up = p.weight_of(g_pos[i]) + d_pos[i];
                    if let (Some(spec), Some(rg)) = (read_noise.as_ref(), rng_p.as_mut()) {
                        up += spec.sample(rg);
                    }
                    *o = match (g_neg, d_neg) {
                        (Some(gn), Some(dn)) => {
                            let mut un = p.weight_of(gn[i]) + dn[i];
                            if let (Some(spec), Some(rg)) = (read_noise.as_ref(), rng_n.as_mut()) {
                                un += spec.sample(rg);
                            }
                            k * (up - un)
                        }
                        _ => k * (up - ur),
                    };
                }
            },
        );
        out
    }

    fn check_shape(&self, a: &ArrayView2<f64>, what: &str) -> Result<()> {
        if a.dim() != (self.rows, self.cols) {
            return Err(Error::domain(format!(
                "{what} shape {:?} does not match array {}x{}",
                a.dim(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }

    /// Reset-and-set write of `target` into every cell selected by `mask`
    /// (all cells whose target differs from the stored weight when `mask` is
    /// `None`). Targets are quantized first.
    pub fn write_weights(&mut self, target: ArrayView2<f64>, mask: Option<&[bool]>) -> Result<WriteStats> {
        self.check_shape(&target, "target")?;
        if let Some(m) = mask {
            if m.len() != self.rows * self.cols {
                return Err(Error::domain("write mask length does not match array"));
            }
        }
        let stored;
        let mask_owned: Vec<bool>;
        let mask = match mask {
            Some(m) => m,
            None => {
                stored = self.stored_weights();
                mask_owned = target.iter().zip(stored.iter()).map(|(t, s)| t != s).collect();
                &mask_owned
            }
        };
        let target = target.as_standard_layout();
        let target = target.as_slice().expect("standard layout");
        Ok(self.program_cells(|i| mask[i].then(|| target[i])))
    }

    /// Core of the reset-and-set path. `target_of(i)` yields the real target
    /// for cell `i`, or `None` to leave it untouched.
    fn program_cells<F>(&mut self, target_of: F) -> WriteStats
    where
        F: Fn(usize) -> Option<f64> + Sync,
    {
        let cycle = self.write_cycles;
        self.write_cycles += 1;
        let quant = self.quantizer();
        let p = self.device;
        let cols = self.cols;
        let write_noise = self.noise.write_noise().copied();
        let (seed, id) = (self.seed, self.array_id);
        let this = &*self;
        // compute new state row by row, then commit
        let rows_out: Vec<(Vec<f64>, Option<Vec<f64>>, Vec<f64>, WriteStats)> = par::map_range(self.rows, |r| {
            let base = r * cols;
            let mut gp = this.g_pos[base..base + cols].to_vec();
            let mut gn = this.g_neg.as_ref().map(|g| g[base..base + cols].to_vec());
            let mut lv = this.levels[base..base + cols].to_vec();
            let mut stats = WriteStats::default();
            let mut rng_w = write_noise.map(|_| rng::stream(seed, Domain::WriteNoise, &[id, cycle, r as u64]));
            for c in 0..cols {
                let Some(t) = target_of(base + c) else { continue };
                let q = quant.quantize(t);
                stats.cells_written += 1;
                if write_noise.is_none() && lv[c] == q {
                    // same level, noise-free: reprogramming reproduces the state
                    let (tp, tn) = this.device_targets(q);
                    stats.pulses += tp.map_or(0, |u| device::pulses_for_weight_clamped(u, &p))
                        + tn.map_or(0, |u| device::pulses_for_weight_clamped(u, &p));
                    continue;
                }
                let (tp, tn) = this.device_targets(q);
                let mut set = |u: Option<f64>| -> f64 {
                    match u {
                        None => p.g_min,
                        Some(u) => {
                            let n = device::pulses_for_weight_clamped(u, &p);
                            stats.pulses += n;
                            let g = device::conductance_after_set(n, &p);
                            match (write_noise.as_ref(), rng_w.as_mut()) {
                                (Some(spec), Some(rg)) => {
                                    let uw = g * p.weight_range() / (p.g_max - p.g_min) + spec.sample(rg);
                                    p.conductance_from_weight(uw).clamp(p.g_min, p.g_max)
                                }
                                _ => g,
                            }
                        }
                    }
                };
                gp[c] = set(tp);
                if let Some(gn) = gn.as_mut() {
                    gn[c] = set(tn);
                }
                lv[c] = if write_noise.is_some() { f64::NAN } else { q };
            }
            (gp, gn, lv, stats)
        });
        let mut total = WriteStats::default();
        for (r, (gp, gn, lv, st)) in rows_out.into_iter().enumerate() {
            let base = r * cols;
            self.g_pos[base..base + cols].copy_from_slice(&gp);
            if let (Some(dst), Some(src)) = (self.g_neg.as_mut(), gn) {
                dst[base..base + cols].copy_from_slice(&src);
            }
            self.levels[base..base + cols].copy_from_slice(&lv);
            total += st;
        }
        total
    }

    /// Buffers `delta` (amounts to subtract from the weights) and writes the
    /// cells whose accumulated magnitude exceeds the threshold. Written cells
    /// keep the part of their buffer the quantized write could not apply.
    pub fn accumulated_update(
        &mut self,
        delta: ArrayView2<f64>,
        buffer: &mut Array2<f64>,
        threshold: AccumulateThreshold,
    ) -> Result<WriteStats> {
        self.check_shape(&delta, "delta")?;
        self.check_shape(&buffer.view(), "buffer")?;
        *buffer += &delta;
        let t = match threshold {
            AccumulateThreshold::MeanAbsDelta => buffer.iter().map(|b| b.abs()).sum::<f64>() / buffer.len() as f64,
            AccumulateThreshold::Fixed(t) => t,
        };
        let old = self.stored_weights();
        let quant = self.quantizer();
        let lim = quant.limit();
        let buf = buffer.as_slice().expect("standard layout").to_vec();
        let old_s = old.as_slice().expect("standard layout");
        let stats = self.program_cells(|i| (buf[i].abs() > t).then(|| (old_s[i] - buf[i]).clamp(-lim, lim)));
        if stats.cells_written > 0 {
            let new = self.stored_weights();
            for ((b, o), n) in buffer.iter_mut().zip(old.iter()).zip(new.iter()) {
                if b.abs() > t {
                    *b -= o - n;
                }
            }
        }
        Ok(stats)
    }

    /// Conventional update: each cell receives a pulse train whose length is
    /// proportional to `-delta`, computed as if the device were linear, while
    /// the device responds along its actual LTP/LTD curves. No reset step.
    pub fn linear_update(&mut self, delta: ArrayView2<f64>) -> Result<WriteStats> {
        self.check_shape(&delta, "delta")?;
        let cycle = self.write_cycles;
        self.write_cycles += 1;
        let p = self.device;
        let step = self.device.w_max / p.p_max as f64;
        let cols = self.cols;
        let write_noise = self.noise.write_noise().copied();
        let (seed, id) = (self.seed, self.array_id);
        let delta = delta.as_standard_layout();
        let delta = delta.as_slice().expect("standard layout");
        let pm = p.p_max as f64;
        let to_g = |u: f64| p.conductance_from_weight(u).clamp(p.g_min, p.g_max);

        let g_neg_exists = self.g_neg.is_some();
        let mut gn_buf = self.g_neg.take().unwrap_or_default();
        let mut stats_rows: Vec<WriteStats> = vec![WriteStats::default(); self.rows];
        {
            let g_pos = &mut self.g_pos;
            let levels = &mut self.levels;
            let work = |r: usize, gp: &mut [f64], gn: Option<&mut [f64]>, lv: &mut [f64]| -> WriteStats {
                let mut stats = WriteStats::default();
                let mut rng_w = write_noise.map(|_| rng::stream(seed, Domain::WriteNoise, &[id, cycle, r as u64]));
                let mut noisy = |u: f64| -> f64 {
                    match (write_noise.as_ref(), rng_w.as_mut()) {
                        (Some(spec), Some(rg)) => u + spec.sample(rg),
                        _ => u,
                    }
                };
                let mut gn = gn;
                for c in 0..cols {
                    let change = -delta[r * cols + c];
                    let n = (change.abs() / step).round();
                    if n < 1.0 {
                        continue;
                    }
                    stats.cells_written += 1;
                    stats.pulses += n as u64;
                    lv[c] = f64::NAN;
                    let up = p.weight_of(gp[c]);
                    match gn.as_deref_mut() {
                        Some(gn) => {
                            // move the opposing device toward reset first
                            let (a, b) = if change > 0.0 { (&mut gn[c], &mut gp[c]) } else { (&mut gp[c], &mut gn[c]) };
                            let ua = p.weight_of(*a);
                            let d0 = device::ltd_position(ua, &p);
                            let mut left = n;
                            if ua > p.w_min {
                                let used = (pm - d0).min(left);
                                *a = to_g(noisy(device::ltd_weight_at(d0 + used, &p)));
                                left -= used;
                            }
                            if left > 0.0 {
                                let ub = p.weight_of(*b);
                                let p0 = device::ltp_position(ub, &p);
                                *b = to_g(noisy(device::ltp_weight_at(p0 + left, &p)));
                            }
                        }
                        None => {
                            let u = if change > 0.0 {
                                device::ltp_weight_at(device::ltp_position(up, &p) + n, &p)
                            } else {
                                device::ltd_weight_at(device::ltd_position(up, &p) + n, &p)
                            };
                            gp[c] = to_g(noisy(u));
                        }
                    }
                }
                stats
            };
            let rows = self.rows;
            let results: Vec<WriteStats>;
            if g_neg_exists {
                let mut packed: Vec<(&mut [f64], &mut [f64], &mut [f64])> = g_pos
                    .chunks_mut(cols)
                    .zip(gn_buf.chunks_mut(cols))
                    .zip(levels.chunks_mut(cols))
                    .map(|((a, b), c)| (a, b, c))
                    .collect();
                results = par_rows(&mut packed, |r, (gp, gn, lv)| work(r, gp, Some(gn), lv));
            } else {
                let mut packed: Vec<(&mut [f64], &mut [f64], &mut [f64])> = g_pos
                    .chunks_mut(cols)
                    .zip(levels.chunks_mut(cols))
                    .map(|(a, c)| (a, &mut [][..], c))
                    .collect();
                results = par_rows(&mut packed, |r, (gp, _, lv)| work(r, gp, None, lv));
            }
            debug_assert_eq!(results.len(), rows);
            stats_rows = results;
        }
        if g_neg_exists {
            self.g_neg = Some(gn_buf);
        }
        let mut total = WriteStats::default();
        for s in stats_rows {
            total += s;
        }
        Ok(total)
    }

    /// Analog MAC of one input vector. Amplitude inputs must lie in `[0, 1]`.
    pub fn mac(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.rows {
            return Err(Error::domain(format!(
                "input length {} does not match {} rows",
                input.len(),
                self.rows
            )));
        }
        if self.config.input_encoding == InputEncoding::Amplitude {
            if let Some(bad) = input.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::domain(format!("amplitude input {bad} outside [0, 1]")));
            }
        }
        let x = Array2::from_shape_vec((1, self.rows), input.to_vec()).expect("shape");
        Ok(self.mac_batch(x.view())?.y.into_raw_vec_and_offset().0)
    }

    /// Batched MAC (`batch x rows` inputs). One READ cycle for the batch.
    pub fn mac_batch(&mut self, x: ArrayView2<f64>) -> Result<MacOutput> {
        if x.ncols() != self.rows {
            return Err(Error::domain(format!(
                "input width {} does not match {} rows",
                x.ncols(),
                self.rows
            )));
        }
        let w = self.read_weights();
        self.mac_with_weights(x, w.view())
    }

    /// MAC against an already-read weight matrix.
    pub fn mac_with_weights(&self, x: ArrayView2<f64>, w: ArrayView2<f64>) -> Result<MacOutput> {
        let adc = match self.config.adc {
            None => None,
            Some(a) => {
                let fs = self.adc_full_scale.ok_or_else(|| {
                    Error::state("ADC full scale not calibrated for this array")
                })?;
                Some((a, fs))
            }
        };
        match self.config.input_encoding {
            InputEncoding::Amplitude => Ok(tiled_mac(x, w, self.config.tile_rows, adc, true)),
            InputEncoding::BitSerial => Ok(bit_serial_mac(x, w, self.config.tile_rows, adc, self.config.input_bits)),
        }
    }

    /// Replaces the conductance state (e.g. when restoring a saved model).
    pub fn restore(&mut self, g_pos: Vec<f64>, g_neg: Option<Vec<f64>>) -> Result<()> {
        let n = self.rows * self.cols;
        if g_pos.len() != n || g_neg.as_ref().map_or(false, |g| g.len() != n) {
            return Err(Error::domain("restored conductance length does not match array"));
        }
        if g_neg.is_some() != self.g_neg.is_some() {
            return Err(Error::domain("restored conductances do not match the array scheme"));
        }
        let p = self.device;
        let bad = g_pos
            .iter()
            .chain(g_neg.iter().flatten())
            .find(|g| !(p.g_min..=p.g_max).contains(*g));
        if let Some(g) = bad {
            return Err(Error::domain(format!("restored conductance {g:e} outside device range")));
        }
        self.g_pos = g_pos;
        self.g_neg = g_neg;
        self.levels.iter_mut().for_each(|l| *l = f64::NAN);
        Ok(())
    }

    pub(crate) fn set_cycles(&mut self, read: u64, write: u64) {
        self.read_cycles = read;
        self.write_cycles = write;
    }
}

fn par_rows<T, F>(rows: &mut [T], f: F) -> Vec<WriteStats>
where
    T: Send,
    F: Fn(usize, &mut T) -> WriteStats + Send + Sync,
{
    let mut out = vec![WriteStats::default(); rows.len()];
    par::for_each_chunk_pair_mut(rows, &mut out, 1, |r, t, o| {
        o[0] = f(r, &mut t[0]);
    });
    out
}

/// Row-tiled matrix product with optional per-tile ADC conversion.
pub(crate) fn tiled_mac(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    tile_rows: usize,
    adc: Option<(AdcConfig, f64)>,
    want_slopes: bool,
) -> MacOutput {
    let Some((adc, fs)) = adc else {
        return MacOutput { y: x.dot(&w), slopes: None };
    };
    let rows = w.nrows();
    let mut y = Array2::<f64>::zeros((x.nrows(), w.ncols()));
    let mut slopes = Vec::new();
    let mut start = 0;
    while start < rows {
        let end = (start + tile_rows).min(rows);
        let mut part = x.slice(s![.., start..end]).dot(&w.slice(s![start..end, ..]));
        let mut slope = Array2::<f64>::zeros(part.dim());
        ndarray::Zip::from(&mut part).and(&mut slope).for_each(|p, sl| {
            let (v, d) = adc.convert(*p, fs);
            *p = v;
            *sl = d;
        });
        y += &part;
        if want_slopes {
            slopes.push(slope);
        }
        start = end;
    }
    MacOutput {
        y,
        slopes: want_slopes.then_some(slopes),
    }
}

/// Bit-serial MAC: inputs are scaled per row to `[0, 1]`, split into sign
/// and magnitude, quantized to `bits`, and processed one bit plane at a time.
pub(crate) fn bit_serial_mac(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    tile_rows: usize,
    adc: Option<(AdcConfig, f64)>,
    bits: u32,
) -> MacOutput {
    let levels = ((1u64 << bits) - 1) as f64;
    let scale: Vec<f64> = x
        .axis_iter(Axis(0))
        .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .map(|m| if m > 1.0 { m } else { 1.0 })
        .collect();
    let mut y = Array2::<f64>::zeros((x.nrows(), w.ncols()));
    for sign in [1.0, -1.0] {
        let codes: Array2<u64> = Array2::from_shape_fn(x.dim(), |(i, j)| {
            let v = sign * x[[i, j]] / scale[i];
            if v > 0.0 {
                (v * levels).round() as u64
            } else {
                0
            }
        });
        if codes.iter().all(|&c| c == 0) {
            continue;
        }
        for b in 0..bits {
            let plane = codes.mapv(|c| ((c >> b) & 1) as f64);
            let part = tiled_mac(plane.view(), w, tile_rows, adc, false).y;
            y.scaled_add(sign * (1u64 << b) as f64 / levels, &part);
        }
    }
    for (mut row, s) in y.axis_iter_mut(Axis(0)).zip(&scale) {
        row *= *s;
    }
    MacOutput { y, slopes: None }
}
