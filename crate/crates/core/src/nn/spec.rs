//! Network architecture descriptions and named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    #[serde(rename = "maxpool")]
    MaxPool {
        size: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm,
    Activation {
        function: ActivationKind,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// Activation shape of one sample: `(channels, height, width)`. Dense
/// features are `(n, 1, 1)`.
pub type Shape = (usize, usize, usize);

pub fn shape_len(s: Shape) -> usize {
    s.0 * s.1 * s.2
}

impl LayerSpec {
    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Output shape for input shape `s`, or a description of why the layer
    /// cannot accept it.
    pub fn output_shape(&self, s: Shape) -> std::result::Result<Shape, String> {
        match *self {
            LayerSpec::Dense { units, .. } => {
                if units == 0 {
                    return Err("dense units must be >= 1".into());
                }
                Ok((units, 1, 1))
            }
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                pad,
                ..
            } => {
                if filters == 0 || kernel == 0 || stride == 0 {
                    return Err("conv2d filters, kernel and stride must be >= 1".into());
                }
                let (h, w) = (s.1 + 2 * pad, s.2 + 2 * pad);
                if h < kernel || w < kernel {
                    return Err(format!("conv2d kernel {kernel} larger than padded input {h}x{w}"));
                }
                Ok((filters, (h - kernel) / stride + 1, (w - kernel) / stride + 1))
            }
            LayerSpec::MaxPool { size, stride } => {
                let st = stride.unwrap_or(size);
                if size == 0 || st == 0 {
                    return Err("maxpool size and stride must be >= 1".into());
                }
                if s.1 < size || s.2 < size {
                    return Err(format!("maxpool size {size} larger than input {}x{}", s.1, s.2));
                }
                Ok((s.0, (s.1 - size) / st + 1, (s.2 - size) / st + 1))
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(format!("dropout rate {rate} outside [0, 1)"));
                }
                Ok(s)
            }
            LayerSpec::Flatten => Ok((shape_len(s), 1, 1)),
            LayerSpec::BatchNorm | LayerSpec::Activation { .. } => Ok(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    /// Multiplier on the He-uniform initialization limit.
    #[serde(default = "unit_gain")]
    pub init_gain: f64,
}

fn unit_gain() -> f64 {
    1.0
}

impl NetworkSpec {
    /// Checks that shapes compose and returns the per-layer output shapes.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if shape_len(self.input) == 0 {
            return Err(Error::domain("network input shape must be non-empty"));
        }
        let mut s = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        let mut errs = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l.output_shape(s) {
                Ok(n) => {
                    s = n;
                    out.push(n);
                }
                Err(e) => {
                    errs.push(format!("network.layers[{i}]: {e}"));
                    out.push(s);
                }
            }
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            errs.push(format!("network.init_gain: {} must be > 0", self.init_gain));
        }
        if self.layers.is_empty() {
            errs.push("network.layers: must not be empty".into());
        }
        if errs.is_empty() {
            Ok(out)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Same network with the bias term removed from every dense and conv
    /// layer.
    pub fn without_bias(mut self) -> Self {
        for l in &mut self.layers {
            if let LayerSpec::Dense { bias, .. } | LayerSpec::Conv2d { bias, .. } = l {
                *bias = false;
            }
        }
        self
    }

    pub fn output_len(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map(|&s| shape_len(s)).unwrap_or(0))
    }

    /// Named preset. `batchnorm` inserts a batch-norm layer after every dense
    /// and conv layer.
    pub fn preset(name: &str, batchnorm: bool) -> Result<NetworkSpec> {
        let spec = match name {
            "mlp_784_200_10" => mlp(batchnorm),
            "lenet5" => lenet5(batchnorm),
            "vgg16" => vgg16(batchnorm),
            "c4w1" => c4w1(batchnorm),
            _ => {
                return Err(Error::Config(vec![format!(
                    "network.preset: unknown preset {name:?} (known: {})",
                    PRESETS.join(", ")
                )]))
            }
        };
        Ok(spec)
    }
}

pub const PRESETS: [&str; 4] = ["mlp_784_200_10", "lenet5", "vgg16", "c4w1"];

use ActivationKind::{Relu, Softmax};
use LayerSpec::*;

fn weighted(layers: &mut Vec<LayerSpec>, l: LayerSpec, bn: bool, act: Option<ActivationKind>) {
    layers.push(l);
    if bn {
        layers.push(BatchNorm);
    }
    if let Some(f) = act {
        layers.push(Activation { function: f });
    }
}

fn mlp(bn: bool) -> NetworkSpec {
    let mut l = vec![Flatten];
    weighted(&mut l, Dense { units: 200, bias: true }, bn, Some(Relu));
    weighted(&mut l, Dense { units: 10, bias: true }, bn, Some(Softmax));
    NetworkSpec {
        input: (1, 28, 28),
        layers: l,
        init_gain: 1.0,
    }
}

fn conv(filters: usize, kernel: usize, pad: usize) -> LayerSpec {
    Conv2d {
        filters,
        kernel,
        stride: 1,
        pad,
        bias: true,
    }
}

fn pool() -> LayerSpec {
    MaxPool { size: 2, stride: None }
}

fn lenet5(bn: bool) -> NetworkSpec {
    let mut l = Vec::new();
    weighted(&mut l, conv(6, 5, 2), bn, Some(Relu));
    l.push(pool());
    weighted(&mut l, conv(16, 5, 0), bn, Some(Relu));
    l.push(pool());
    l.push(Flatten);
    weighted(&mut l, Dense { units: 120, bias: true }, bn, Some(Relu));
    weighted(&mut l, Dense { units: 84, bias: true }, bn, Some(Relu));
    weighted(&mut l, Dense { units: 10, bias: true }, bn, Some(Softmax));
    NetworkSpec {
        input: (1, 28, 28),
        layers: l,
        init_gain: 1.0,
    }
}

fn vgg16(bn: bool) -> NetworkSpec {
    let mut l = Vec::new();
    for &f in [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0].iter() {
        if f == 0 {
            l.push(pool());
        } else {
            weighted(&mut l, conv(f, 3, 1), bn, Some(Relu));
        }
    }
    l.push(Flatten);
    weighted(&mut l, Dense { units: 512, bias: true }, bn, Some(Relu));
    l.push(Dropout { rate: 0.5 });
    weighted(&mut l, Dense { units: 512, bias: true }, bn, Some(Relu));
    l.push(Dropout { rate: 0.5 });
    weighted(&mut l, Dense { units: 10, bias: true }, false, Some(Softmax));
    NetworkSpec {
        input: (3, 32, 32),
        layers: l,
        init_gain: 1.0,
    }
}

fn c4w1(bn: bool) -> NetworkSpec {
    let mut l = Vec::new();
    for f in [32, 64, 128] {
        weighted(&mut l, conv(f, 3, 1), bn, Some(Relu));
        l.push(pool());
    }
    l.push(Flatten);
    weighted(&mut l, Dense { units: 4, bias: true }, false, Some(Softmax));
    NetworkSpec {
        input: (3, 32, 32),
        layers: l,
        init_gain: 1.0,
    }
}
