//! Layer graph with crossbar-backed dense and convolution layers.

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, BatchNorm, ConvGeom, Dropout, MaxPool};
use super::optim::{self, OptState, OptimizerSpec};
use super::spec::{ActivationKind, LayerSpec, NetworkSpec, Shape};
use crate::crossbar::{
    self, AdcConfig, CrossbarConfig, InputEncoding, MacOutput, NoiseModel, SynapseArray, UpdateMode,
    WeightStorage, WriteStats,
};
use crate::device::DeviceParams;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Full-precision weights held digitally.
    Software,
    /// Weights programmed into simulated synaptic arrays.
    Crossbar,
}

/// How trainable layers store and read their weights. The crossbar settings
/// that concern readout (tiling, ADC, input encoding) also apply to the
/// software backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backend {
    pub kind: BackendKind,
    pub crossbar: CrossbarConfig,
    pub device: DeviceParams,
    pub noise: NoiseModel,
}

/// Dense or convolution layer whose weight matrix is `rows` (inputs) by
/// `cols` (outputs).
#[derive(Debug, Clone)]
pub struct Trainable {
    pub geom: Option<ConvGeom>,
    pub rows: usize,
    pub cols: usize,
    /// Full-precision copy: the weights themselves for the software backend,
    /// the shadow weights for shadow storage, otherwise refreshed from the
    /// array on demand.
    pub latent: Array2<f64>,
    pub bias: Array2<f64>,
    pub has_bias: bool,
    pub array: Option<SynapseArray>,
    /// Pending updates for accumulated mode.
    pub buffer: Option<Array2<f64>>,
    pub adc_full_scale: Option<f64>,
    pub grad_w: Array2<f64>,
    pub grad_b: Array2<f64>,
    pub opt_w: OptState,
    pub opt_b: OptState,
    cache: Option<(Array2<f64>, Array2<f64>, Option<Vec<Array2<f64>>>)>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Trainable(Box<Trainable>),
    BatchNorm(BatchNorm),
    MaxPool(MaxPool),
    Activation(Activation),
    Dropout(Dropout),
    Flatten,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub backend: Backend,
    pub layers: Vec<Layer>,
    pub shapes: Vec<Shape>,
    pub seed: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
}

/// Forward pass variants that do not touch training caches.
enum Pass<'a> {
    Infer,
    /// Records the largest pre-ADC partial sum per layer.
    Calibrate(&'a mut [f64]),
}

impl Trainable {
    fn new(geom: Option<ConvGeom>, rows: usize, cols: usize, has_bias: bool, gain: f64, seed: u64, index: usize) -> Self {
        let limit = gain * (6.0 / rows as f64).sqrt();
        let mut r = rng::stream(seed, Domain::Init, &[index as u64]);
        let latent = Array2::from_shape_simple_fn((rows, cols), || r.random_range(-limit..limit));
        Trainable {
            geom,
            rows,
            cols,
            latent,
            bias: Array2::zeros((1, cols)),
            has_bias,
            array: None,
            buffer: None,
            adc_full_scale: None,
            grad_w: Array2::zeros((rows, cols)),
            grad_b: Array2::zeros((1, cols)),
            opt_w: OptState::new((rows, cols)),
            opt_b: OptState::new((1, cols)),
            cache: None,
        }
    }

    /// Weights as seen by one read of the layer.
    pub fn read(&mut self) -> Array2<f64> {
        match self.array.as_mut() {
            Some(a) => a.read_weights(),
            None => self.latent.clone(),
        }
    }

    /// Noise-free weights currently held by the layer.
    pub fn stored(&self) -> Array2<f64> {
        match self.array.as_ref() {
            Some(a) => a.stored_weights(),
            None => self.latent.clone(),
        }
    }

    fn gemm_input(&self, x: &Array2<f64>) -> Array2<f64> {
        match &self.geom {
            Some(g) => g.im2col(x),
            None => x.clone(),
        }
    }

    fn finish(&self, mut y: Array2<f64>, batch: usize) -> Array2<f64> {
        y += &self.bias;
        match &self.geom {
            Some(g) => g.to_channel_major(&y, batch),
            None => y,
        }
    }
}

fn mac(
    cfg: &CrossbarConfig,
    fs: Option<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    want_slopes: bool,
) -> Result<MacOutput> {
    let adc = match cfg.adc {
        None => None,
        Some(a) => Some((
            a,
            fs.ok_or_else(|| Error::state("ADC full scale not calibrated"))?,
        )),
    };
    Ok(match cfg.input_encoding {
        InputEncoding::Amplitude => crossbar::tiled_mac(x.view(), w.view(), cfg.tile_rows, adc, want_slopes),
        InputEncoding::BitSerial => crossbar::bit_serial_mac(x.view(), w.view(), cfg.tile_rows, adc, cfg.input_bits),
    })
}

fn max_partial_sum(x: &Array2<f64>, w: &Array2<f64>, tile_rows: usize) -> f64 {
    let mut m = 0.0f64;
    let mut start = 0;
    while start < w.nrows() {
        let end = (start + tile_rows).min(w.nrows());
        let p = x.slice(s![.., start..end]).dot(&w.slice(s![start..end, ..]));
        m = p.iter().fold(m, |a, &b| a.max(b));
        start = end;
    }
    m
}

impl Network {
    /// Builds the network, draws initial weights and, for the crossbar
    /// backend, programs them into freshly reset arrays.
    pub fn new(spec: NetworkSpec, backend: Backend, seed: u64) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut input = spec.input;
        for (i, l) in spec.layers.iter().enumerate() {
            let out = shapes[i];
            layers.push(match *l {
                LayerSpec::Dense { units, bias } => {
                    let rows = input.0 * input.1 * input.2;
                    Layer::Trainable(Box::new(Trainable::new(None, rows, units, bias, spec.init_gain, seed, i)))
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    pad,
                    bias,
                } => {
                    let g = ConvGeom {
                        input,
                        kernel,
                        stride,
                        pad,
                        out_h: out.1,
                        out_w: out.2,
                    };
                    Layer::Trainable(Box::new(Trainable::new(Some(g), g.patch_len(), filters, bias, spec.init_gain, seed, i)))
                }
                LayerSpec::MaxPool { size, stride } => {
                    Layer::MaxPool(MaxPool::new(input, out, size, stride.unwrap_or(size)))
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(input)),
                LayerSpec::Activation { function } => Layer::Activation(Activation::new(function)),
                LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(rate)),
                LayerSpec::Flatten => Layer::Flatten,
            });
            input = out;
        }
        let mut net = Network {
            spec,
            backend,
            layers,
            shapes,
            seed,
            step: 0,
        };
        if net.backend.kind == BackendKind::Crossbar {
            net.program_arrays()?;
        }
        Ok(net)
    }

    pub fn is_crossbar(&self) -> bool {
        self.backend.kind == BackendKind::Crossbar
    }

    pub fn trainables(&self) -> impl Iterator<Item = &Trainable> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Trainable(t) => Some(&**t),
            _ => None,
        })
    }

    pub fn trainables_mut(&mut self) -> impl Iterator<Item = &mut Trainable> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Trainable(t) => Some(&mut **t),
            _ => None,
        })
    }

    /// Switches to the crossbar backend described by `backend` and programs
    /// every trainable layer's current weights (quantized) into new arrays.
    pub fn to_crossbar(&mut self, backend: Backend) -> Result<()> {
        for t in self.trainables_mut() {
            if t.array.is_some() {
                t.latent = t.stored();
            }
        }
        self.backend = Backend {
            kind: BackendKind::Crossbar,
            ..backend
        };
        self.program_arrays()
    }

    /// Creates arrays for every trainable layer and writes the clipped
    /// full-precision weights into them.
    pub fn program_arrays(&mut self) -> Result<()> {
        let b = self.backend.clone();
        let seed = self.seed;
        for (id, t) in self.trainables_mut().enumerate() {
            let mut a = SynapseArray::new(t.rows, t.cols, b.device, &b.crossbar, b.noise, seed, id as u64)?;
            let lim = a.quantizer().limit();
            t.latent.mapv_inplace(|w| w.clamp(-lim, lim));
            let all = vec![true; t.rows * t.cols];
            a.write_weights(t.latent.view(), Some(&all))?;
            t.buffer = (b.crossbar.update_mode == UpdateMode::Accumulated).then(|| Array2::zeros((t.rows, t.cols)));
            t.array = Some(a);
        }
        Ok(())
    }

    /// Replaces the noise model of every array. New D2D maps are drawn from
    /// `seed`, modelling a different chip holding the same programmed state.
    pub fn set_noise(&mut self, noise: NoiseModel, seed: u64) -> Result<()> {
        self.backend.noise = noise;
        for t in self.trainables_mut() {
            if let Some(a) = t.array.as_mut() {
                a.set_noise(noise, seed)?;
            }
        }
        Ok(())
    }

    /// Enables (or replaces) the ADC on every trainable layer and clears the
    /// calibrated full scales.
    pub fn set_adc(&mut self, adc: Option<AdcConfig>) {
        self.backend.crossbar.adc = adc;
        let fs = adc.and_then(|a| a.full_scale());
        for t in self.trainables_mut() {
            t.adc_full_scale = fs;
            if let Some(a) = t.array.as_mut() {
                a.set_adc(adc);
            }
        }
    }

    /// One read of every trainable layer.
    pub fn read_weights(&mut self) -> Vec<Option<Array2<f64>>> {
        self.layers
            .iter_mut()
            .map(|l| match l {
                Layer::Trainable(t) => Some(t.read()),
                _ => None,
            })
            .collect()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        let want = self.spec.input.0 * self.spec.input.1 * self.spec.input.2;
        if x.ncols() != want {
            return Err(Error::domain(format!(
                "input width {} does not match network input {want}",
                x.ncols()
            )));
        }
        Ok(())
    }

    fn forward_pass(&self, x: &Array2<f64>, weights: &[Option<Array2<f64>>], mut pass: Pass) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let cfg = &self.backend.crossbar;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = match l {
                Layer::Trainable(t) => {
                    let w = weights[i].as_ref().ok_or_else(|| Error::state("missing layer weights"))?;
                    let xin = t.gemm_input(&h);
                    let y = match &mut pass {
                        Pass::Calibrate(maxes) if cfg.adc.is_some() && t.adc_full_scale.is_none() => {
                            maxes[i] = maxes[i].max(max_partial_sum(&xin, w, cfg.tile_rows));
                            xin.dot(w)
                        }
                        _ => mac(cfg, t.adc_full_scale, &xin, w, false)?.y,
                    };
                    t.finish(y, h.nrows())
                }
                Layer::BatchNorm(bn) => bn.forward_infer(&h),
                Layer::MaxPool(p) => p.forward_infer(&h),
                Layer::Activation(a) => a.apply(&h),
                Layer::Dropout(_) | Layer::Flatten => h,
            };
        }
        Ok(h)
    }

    /// Inference forward pass against previously read weights.
    pub fn forward_infer(&self, x: &Array2<f64>, weights: &[Option<Array2<f64>>]) -> Result<Array2<f64>> {
        self.forward_pass(x, weights, Pass::Infer)
    }

    /// Sets each ADC full scale to the largest positive partial sum observed
    /// on `x` (layers that already have a full scale keep it).
    pub fn calibrate_adc(&mut self, x: &Array2<f64>) -> Result<()> {
        if self.backend.crossbar.adc.is_none() {
            return Ok(());
        }
        let w: Vec<Option<Array2<f64>>> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Trainable(t) => Some(t.stored()),
                _ => None,
            })
            .collect();
        let mut maxes = vec![0.0f64; self.layers.len()];
        // earlier layers must be calibrated before later layers see ADC output
        for i in 0..self.layers.len() {
            let needs = matches!(&self.layers[i], Layer::Trainable(t) if t.adc_full_scale.is_none());
            if !needs {
                continue;
            }
            maxes.iter_mut().for_each(|m| *m = 0.0);
            self.forward_pass(x, &w, Pass::Calibrate(&mut maxes))?;
            if let Layer::Trainable(t) = &mut self.layers[i] {
                let fs = if maxes[i] > 0.0 { maxes[i] } else { 1.0 };
                t.adc_full_scale = Some(fs);
                if let Some(a) = t.array.as_mut() {
                    a.set_adc_full_scale(fs);
                }
            }
        }
        Ok(())
    }

    /// Training forward pass. Reads every array once. When the last layer is
    /// a softmax it is skipped and the logits are returned.
    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let n = self.layers.len();
        let skip_last = self.ends_in_softmax();
        let cfg = self.backend.crossbar.clone();
        let (seed, step) = (self.seed, self.step);
        let mut h = x.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            if skip_last && i + 1 == n {
                break;
            }
            h = match l {
                Layer::Trainable(t) => {
                    let w = t.read();
                    let xin = t.gemm_input(&h);
                    let out = mac(&cfg, t.adc_full_scale, &xin, &w, cfg.adc.is_some())?;
                    let y = t.finish(out.y, h.nrows());
                    t.cache = Some((xin, w, out.slopes));
                    y
                }
                Layer::BatchNorm(bn) => bn.forward_train(&h)?,
                Layer::MaxPool(p) => p.forward_train(&h),
                Layer::Activation(a) => a.forward_train(&h),
                Layer::Dropout(d) => {
                    let mut r = rng::stream(seed, Domain::Dropout, &[step, i as u64]);
                    d.forward_train(&h, &mut r)
                }
                Layer::Flatten => h,
            };
        }
        Ok(h)
    }

    pub fn ends_in_softmax(&self) -> bool {
        matches!(
            self.layers.last(),
            Some(Layer::Activation(a)) if a.kind == ActivationKind::Softmax
        )
    }

    /// Backpropagates `grad` (gradient of the loss with respect to the output
    /// of [`forward_train`](Self::forward_train)) and stores parameter
    /// gradients. Returns the gradient with respect to the input.
    pub fn backward(&mut self, grad: &Array2<f64>) -> Result<Array2<f64>> {
        let n = self.layers.len();
        let skip_last = self.ends_in_softmax();
        let tile = self.backend.crossbar.tile_rows;
        let mut g = grad.clone();
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            if skip_last && i + 1 == n {
                continue;
            }
            g = match l {
                Layer::Trainable(t) => {
                    let (xin, w, slopes) = t
                        .cache
                        .take()
                        .ok_or_else(|| Error::state("backward called without a training forward pass"))?;
                    let batch = g.nrows();
                    let g2 = match &t.geom {
                        Some(geom) => geom.from_channel_major(&g, t.cols),
                        None => g,
                    };
                    t.grad_b = g2.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxin = match slopes {
                        None => {
                            t.grad_w = xin.t().dot(&g2);
                            g2.dot(&w.t())
                        }
                        Some(sl) => {
                            let mut dx = Array2::<f64>::zeros(xin.dim());
                            for (k, s) in sl.iter().enumerate() {
                                let r0 = k * tile;
                                let r1 = (r0 + tile).min(t.rows);
                                let gt = &g2 * s;
                                t.grad_w
                                    .slice_mut(s![r0..r1, ..])
                                    .assign(&xin.slice(s![.., r0..r1]).t().dot(&gt));
                                dx.slice_mut(s![.., r0..r1]).assign(&gt.dot(&w.slice(s![r0..r1, ..]).t()));
                            }
                            dx
                        }
                    };
                    match &t.geom {
                        Some(geom) => geom.col2im(&dxin, batch),
                        None => dxin,
                    }
                }
                Layer::BatchNorm(bn) => bn.backward(&g)?,
                Layer::MaxPool(p) => p.backward(&g)?,
                Layer::Activation(a) => a.backward(&g)?,
                Layer::Dropout(d) => d.backward(&g)?,
                Layer::Flatten => g,
            };
        }
        Ok(g)
    }

    /// Applies one optimizer step to every parameter. Trainable weights go
    /// through the configured crossbar write path.
    pub fn apply_updates(&mut self, opt: &OptimizerSpec, lr: f64) -> Result<WriteStats> {
        self.step += 1;
        let cfg = self.backend.crossbar.clone();
        let crossbar = self.is_crossbar();
        let mut stats = WriteStats::default();
        for l in self.layers.iter_mut() {
            match l {
                Layer::Trainable(t) => {
                    let db = optim::step(opt, &t.grad_b, &mut t.opt_b, lr);
                    if t.has_bias {
                        t.bias -= &db;
                    }
                    let dw = optim::step(opt, &t.grad_w, &mut t.opt_w, lr);
                    if !crossbar {
                        t.latent -= &dw;
                        continue;
                    }
                    let a = t.array.as_mut().expect("crossbar backend has arrays");
                    stats += match cfg.update_mode {
                        UpdateMode::ResetAndSet => match cfg.weight_storage {
                            WeightStorage::Shadow => {
                                let q = a.quantizer();
                                let lim = q.limit();
                                let mut mask = Vec::with_capacity(t.rows * t.cols);
                                Zip::from(&mut t.latent).and(&dw).for_each(|w, &d| {
                                    let old = q.quantize(*w);
                                    *w = (*w - d).clamp(-lim, lim);
                                    mask.push(q.quantize(*w) != old);
                                });
                                a.write_weights(t.latent.view(), Some(&mask))?
                            }
                            WeightStorage::Device => {
                                let lim = a.quantizer().limit();
                                let old = a.stored_weights();
                                let target = Zip::from(&old).and(&dw).map_collect(|&w, &d| (w - d).clamp(-lim, lim));
                                let mask: Vec<bool> = dw.iter().map(|&d| d != 0.0).collect();
                                a.write_weights(target.view(), Some(&mask))?
                            }
                        },
                        UpdateMode::Accumulated => {
                            let buf = t.buffer.get_or_insert_with(|| Array2::zeros((t.rows, t.cols)));
                            a.accumulated_update(dw.view(), buf, cfg.accumulate_threshold)?
                        }
                        UpdateMode::Linear => a.linear_update(dw.view())?,
                    };
                }
                Layer::BatchNorm(bn) => {
                    let d = optim::step(opt, &bn.grad_nu, &mut bn.opt_nu, lr);
                    bn.nu -= &d;
                    let d = optim::step(opt, &bn.grad_xi, &mut bn.opt_xi, lr);
                    bn.xi -= &d;
                }
                _ => {}
            }
        }
        Ok(stats)
    }

    /// Refreshes the full-precision copy of device-resident weights from the
    /// arrays. Shadow and software weights are left alone.
    pub fn sync_latent(&mut self) {
        let shadow = self.backend.crossbar.update_mode == UpdateMode::ResetAndSet
            && self.backend.crossbar.weight_storage == WeightStorage::Shadow;
        if shadow {
            return;
        }
        for t in self.trainables_mut() {
            if let Some(a) = t.array.as_ref() {
                t.latent = a.stored_weights();
            }
        }
    }

    /// Class probabilities for `x`, evaluated in parallel chunks against one
    /// read of the weights.
    pub fn predict(&mut self, x: &Array2<f64>, chunk: usize) -> Result<Array2<f64>> {
        let w = self.read_weights();
        self.predict_with(x, &w, chunk)
    }

    pub fn predict_with(&self, x: &Array2<f64>, w: &[Option<Array2<f64>>], chunk: usize) -> Result<Array2<f64>> {
        let chunk = chunk.max(1);
        let n = x.nrows();
        let parts = par::map_range(n.div_ceil(chunk), |k| {
            let r0 = k * chunk;
            let r1 = (r0 + chunk).min(n);
            let mut y = self.forward_infer(&x.slice(s![r0..r1, ..]).to_owned(), w)?;
            if !self.ends_in_softmax() {
                y = super::layers::softmax_rows(&y);
            }
            Ok(y)
        });
        let parts: Result<Vec<Array2<f64>>> = parts.into_iter().collect();
        let parts = parts?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::state(e.to_string()))
    }
}
