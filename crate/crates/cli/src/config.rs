//! Experiment configuration files.
//!
//! A config is a JSON object. Every key is checked against the schema before
//! anything runs; all unknown keys and all invalid values are reported
//! together.

use std::path::{Path, PathBuf};

use cimsim::crossbar::{AdcConfig, CrossbarConfig, NoiseModel};
use cimsim::device::{self, DeviceParams, DevicePreset};
use cimsim::nn::{BackendKind, LayerSpec, NetworkSpec, Shape, TrainConfig};
use cimsim::snn::{self, SnnConfig, StdpParams};
use cimsim::variation::VariationSpec;
use cimsim::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: DatasetKind,
    /// Directory holding the raw files. Falls back to `--mnist-dir` /
    /// `--cifar-dir`, then `CIMSIM_MNIST_DIR` / `CIMSIM_CIFAR_DIR`, then
    /// `data/mnist` / `data/cifar-10-batches-bin`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Stratified training subset size.
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: DatasetKind::Mnist,
            dir: None,
            train_subset: None,
            test_subset: None,
        }
    }
}

/// Either a named architecture or an explicit layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub input: Option<Shape>,
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
    /// Insert batch normalization after every dense/conv layer of a preset.
    #[serde(default)]
    pub batchnorm: bool,
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default = "one")]
    pub init_gain: f64,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

impl NetworkConfig {
    pub fn spec(&self) -> Result<NetworkSpec, Vec<String>> {
        let mut spec = match (&self.preset, &self.layers) {
            (Some(p), None) => NetworkSpec::preset(p, self.batchnorm).map_err(violations_of)?,
            (None, Some(layers)) => NetworkSpec {
                input: self.input.ok_or_else(|| vec!["network.input: required with network.layers".to_string()])?,
                layers: layers.clone(),
                init_gain: 1.0,
            },
            _ => return Err(vec!["network: give exactly one of `preset` and `layers`".into()]),
        };
        spec.init_gain = self.init_gain;
        if !self.bias {
            spec = spec.without_bias();
        }
        spec.shapes().map_err(violations_of)?;
        Ok(spec)
    }
}

/// A device preset plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviceConfig {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub g_max: Option<f64>,
    #[serde(default)]
    pub g_min: Option<f64>,
    #[serde(default)]
    pub w_max: Option<f64>,
    /// Derived from the ON/OFF ratio when absent.
    #[serde(default)]
    pub w_min: Option<f64>,
    #[serde(default)]
    pub theta_ltp: Option<f64>,
    #[serde(default)]
    pub theta_ltd: Option<f64>,
    /// Derived from the bit precision when absent.
    #[serde(default)]
    pub p_max: Option<u64>,
}

impl DeviceConfig {
    /// Copies the preset's values into every unset field, so the config
    /// echo names all device parameters explicitly.
    pub fn materialize(&mut self) -> Result<(), Vec<String>> {
        let Some(name) = &self.preset else {
            return Ok(());
        };
        let p = device::builtin_preset(name).ok_or_else(|| {
            vec![format!(
                "device.preset: unknown preset {name:?} (known: {})",
                device::builtin_presets().keys().cloned().collect::<Vec<_>>().join(", ")
            )]
        })?;
        self.g_max.get_or_insert(p.g_max);
        self.g_min.get_or_insert(p.g_min);
        self.w_max.get_or_insert(p.w_max);
        self.theta_ltp.get_or_insert(p.theta_ltp);
        self.theta_ltd.get_or_insert(p.theta_ltd);
        if self.w_min.is_none() {
            self.w_min = p.w_min;
        }
        if self.p_max.is_none() {
            self.p_max = p.p_max;
        }
        Ok(())
    }

    pub fn resolve(&self, bits: u32) -> Result<DeviceParams, Vec<String>> {
        let mut c = self.clone();
        c.materialize()?;
        let mut v = Vec::new();
        for (name, x) in [
            ("g_max", c.g_max),
            ("g_min", c.g_min),
            ("theta_ltp", c.theta_ltp),
            ("theta_ltd", c.theta_ltd),
        ] {
            if x.is_none() {
                v.push(format!("device.{name}: required (no preset given)"));
            }
        }
        if !v.is_empty() {
            return Err(v);
        }
        let preset = DevicePreset {
            g_max: c.g_max.unwrap_or_default(),
            g_min: c.g_min.unwrap_or_default(),
            w_max: c.w_max.unwrap_or(1.0),
            w_min: c.w_min,
            theta_ltp: c.theta_ltp.unwrap_or_default(),
            theta_ltd: c.theta_ltd.unwrap_or_default(),
            p_max: c.p_max,
            technology: None,
            material: None,
        };
        preset
            .resolve(device::default_p_max(bits.clamp(1, 62)))
            .map_err(|e| vec![format!("device: {e}")])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SnnRunConfig {
    /// Name of a bundled STDP preset; ignored when `params` is given.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub params: Option<StdpParams>,
    #[serde(default)]
    pub network: SnnConfig,
}

impl SnnRunConfig {
    pub fn params(&self) -> Result<StdpParams, Vec<String>> {
        let p = match (&self.params, &self.preset) {
            (Some(p), _) => p.clone(),
            (None, Some(name)) => snn::builtin_preset(name).ok_or_else(|| {
                vec![format!(
                    "snn.preset: unknown preset {name:?} (known: {})",
                    snn::builtin_presets().keys().cloned().collect::<Vec<_>>().join(", ")
                )]
            })?,
            (None, None) => return Err(vec!["snn: give `preset` or `params`".into()]),
        };
        let v = p.violations("snn.params");
        if v.is_empty() {
            Ok(p)
        } else {
            Err(v)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    /// Model to evaluate. Defaults to `model.cimf` in the output directory.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Independent variation draws averaged per evaluation.
    #[serde(default = "one_usize")]
    pub repeats: usize,
}

fn one_usize() -> usize {
    1
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            model: None,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrainConfig {
    /// Starting model. When absent the base network is first trained with `train`.
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// ADC installed before retraining.
    #[serde(default)]
    pub adc: Option<AdcConfig>,
    /// Retraining schedule; defaults to `train`.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    #[default]
    Train,
    Infer,
    Retrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Dotted path of a numeric config key, e.g. `d2d.sigma`.
    pub axis: String,
    pub values: Vec<f64>,
    #[serde(default)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub snn: Option<SnnRunConfig>,
    #[serde(default = "crossbar_backend")]
    pub backend: BackendKind,
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default)]
    pub crossbar: CrossbarConfig,
    #[serde(default)]
    pub c2c: VariationSpec,
    #[serde(default = "yes")]
    pub c2c_on_read: bool,
    #[serde(default = "yes")]
    pub c2c_on_write: bool,
    #[serde(default)]
    pub d2d: VariationSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub infer: InferConfig,
    #[serde(default)]
    pub retrain: RetrainConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_seed() -> u64 {
    1
}

fn crossbar_backend() -> BackendKind {
    BackendKind::Crossbar
}

fn violations_of(e: Error) -> Vec<String> {
    match e {
        Error::Config(v) => v,
        other => vec![other.to_string()],
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(vec![format!("{}: invalid JSON: {e}", path.display())]))?;
        RunConfig::from_value(&value)
    }

    /// Parses and validates. Unknown keys and invalid values are collected
    /// into a single [`Error::Config`].
    pub fn from_value(value: &Value) -> Result<RunConfig, Error> {
        let mut cfg: RunConfig = serde_json::from_value(value.clone()).map_err(|e| Error::Config(vec![format!("schema: {e}")]))?;
        let mut v = Vec::new();
        let known = serde_json::to_value(&cfg).expect("config serializes");
        unknown_keys(value, &known, "", &mut v);
        v.extend(cfg.materialize());
        if v.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(v))
        }
    }

    /// Resolves presets into explicit values and returns every violation.
    fn materialize(&mut self) -> Vec<String> {
        let mut v = Vec::new();
        if self.name.trim().is_empty() {
            v.push("name: must not be empty".into());
        }
        match (&self.network, &self.snn) {
            (Some(n), None) => {
                if let Err(e) = n.spec() {
                    v.extend(e);
                }
                if !(n.init_gain > 0.0 && n.init_gain.is_finite()) {
                    v.push(format!("network.init_gain: {} must be > 0", n.init_gain));
                }
                v.extend(self.crossbar.violations("crossbar"));
                if let Err(e) = self.device.materialize() {
                    v.extend(e);
                } else if self.crossbar.bit_precision >= 1 && self.crossbar.bit_precision <= 62 {
                    if let Err(e) = self.device.resolve(self.crossbar.bit_precision) {
                        v.extend(e);
                    }
                }
                v.extend(self.train.violations("train"));
                if let Some(t) = &self.retrain.train {
                    v.extend(t.violations("retrain.train"));
                }
                if let Some(adc) = &self.retrain.adc {
                    if let Err(e) = adc.validate() {
                        v.push(format!("retrain.adc: {e}"));
                    }
                }
            }
            (None, Some(s)) => {
                if let Err(e) = s.params() {
                    v.extend(e);
                }
                v.extend(s.network.violations("snn.network"));
            }
            _ => v.push("network, snn: give exactly one".into()),
        }
        for (name, spec) in [("c2c", &self.c2c), ("d2d", &self.d2d)] {
            if let Err(e) = spec.validate() {
                v.push(format!("{name}: {e}"));
            }
        }
        if self.infer.repeats == 0 {
            v.push("infer.repeats: must be >= 1".into());
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                v.push("sweep.values: must not be empty".into());
            }
            if s.values.iter().any(|x| !x.is_finite()) {
                v.push("sweep.values: must be finite".into());
            }
        }
        v
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            c2c: self.c2c,
            c2c_on_read: self.c2c_on_read,
            c2c_on_write: self.c2c_on_write,
            d2d: self.d2d,
        }
    }

    /// Copy with the numeric key at dotted `path` set to `x`. `path` may
    /// list several keys separated by commas; all receive `x`.
    pub fn with_value(&self, path: &str, x: f64) -> Result<RunConfig, Error> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for key in path.split(',').map(str::trim) {
            set_number(&mut value, key, x)?;
        }
        RunConfig::from_value(&value).map_err(|e| match e {
            Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("sweep {path}={x}: {m}")).collect()),
            e => e,
        })
    }
}

fn set_number(value: &mut Value, path: &str, x: f64) -> Result<(), Error> {
    let mut slot = value;
    for part in path.split('.') {
        slot = match slot {
            Value::Object(m) if m.contains_key(part) => m.get_mut(part).expect("key checked"),
            _ => return Err(Error::Config(vec![format!("sweep.axis: {path:?} is not a config key")])),
        };
    }
    let is_int = match slot {
        Value::Number(n) => n.is_u64() || n.is_i64(),
        // Unset optional numeric keys.
        Value::Null => false,
        _ => return Err(Error::Config(vec![format!("sweep.axis: {path:?} is not a numeric config key")])),
    };
    *slot = if is_int && x.fract() == 0.0 {
        Value::from(x as i64)
    } else {
        serde_json::Number::from_f64(x)
            .map(Value::Number)
            .ok_or_else(|| Error::Config(vec![format!("sweep.values: {x} is not finite")]))?
    };
    Ok(())
}

/// Reports keys of `given` absent from the fully serialized config `known`.
fn unknown_keys(given: &Value, known: &Value, at: &str, out: &mut Vec<String>) {
    let join = |k: &str| if at.is_empty() { k.to_string() } else { format!("{at}.{k}") };
    match (given, known) {
        (Value::Object(g), Value::Object(k)) => {
            for (key, gv) in g {
                match k.get(key) {
                    Some(kv) => unknown_keys(gv, kv, &join(key), out),
                    None => out.push(format!("{}: unknown key", join(key))),
                }
            }
        }
        (Value::Array(g), Value::Array(k)) => {
            for (i, (gv, kv)) in g.iter().zip(k).enumerate() {
                unknown_keys(gv, kv, &format!("{at}[{i}]"), out);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({
            "name": "t",
            "network": {"preset": "mlp_784_200_10"},
            "device": {"preset": "rram-ni-hfo2-tin"}
        })
    }

    #[test]
    fn minimal_config_parses_and_materializes() {
        let c = RunConfig::from_value(&base()).unwrap();
        assert_eq!(c.device.theta_ltp, Some(0.2476));
        assert_eq!(c.crossbar.bit_precision, 1);
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let mut v = base();
        v["colour"] = json!(1);
        v["crossbar"] = json!({"bit_precison": 2});
        v["train"] = json!({"optimizer": {"kind": "sgd"}, "learning_rate": 0.1, "epochs": 1, "batch_size": 10, "momentum": 0.9});
        let Err(Error::Config(errs)) = RunConfig::from_value(&v) else {
            panic!("expected config error")
        };
        let all = errs.join("\n");
        for k in ["colour", "crossbar.bit_precison", "train.momentum"] {
            assert!(all.contains(k), "{k} missing from {all}");
        }
    }

    #[test]
    fn zero_bits_names_the_key() {
        let mut v = base();
        v["crossbar"] = json!({"bit_precision": 0});
        let Err(Error::Config(errs)) = RunConfig::from_value(&v) else {
            panic!("expected config error")
        };
        assert!(errs.iter().any(|e| e.contains("crossbar.bit_precision")), "{errs:?}");
    }

    #[test]
    fn sweep_axis_must_be_numeric() {
        let c = RunConfig::from_value(&base()).unwrap();
        let d = c.with_value("d2d.sigma", 0.1).unwrap();
        assert_eq!(d.d2d.sigma, 0.1);
        let b = c.with_value("crossbar.bit_precision", 4.0).unwrap();
        assert_eq!(b.crossbar.bit_precision, 4);
        assert!(matches!(c.with_value("crossbar.scheme", 1.0), Err(Error::Config(_))));
        assert!(matches!(c.with_value("nope.key", 1.0), Err(Error::Config(_))));
        let t = c.with_value("device.theta_ltp, device.theta_ltd", 3.0).unwrap();
        assert_eq!((t.device.theta_ltp, t.device.theta_ltd), (Some(3.0), Some(3.0)));
    }
}
