//! Non-crossbar layers and convolution lowering.

use ndarray::{Array2, Axis, Zip};
use rand::Rng;

use super::optim::OptState;
use super::spec::{ActivationKind, Shape};
use crate::error::{Error, Result};
use crate::par;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over features (dense input) or channels (conv input,
/// statistics pooled over batch and spatial positions).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub spatial: usize,
    /// Learnable scale, `1 x channels`.
    pub nu: Array2<f64>,
    /// Learnable shift, `1 x channels`.
    pub xi: Array2<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub grad_nu: Array2<f64>,
    pub grad_xi: Array2<f64>,
    pub opt_nu: OptState,
    pub opt_xi: OptState,
    cache: Option<(Array2<f64>, Vec<f64>)>,
}

impl BatchNorm {
    pub fn new(shape: Shape) -> Self {
        let (channels, spatial) = if shape.1 * shape.2 == 1 {
            (shape.0, 1)
        } else {
            (shape.0, shape.1 * shape.2)
        };
        BatchNorm {
            channels,
            spatial,
            nu: Array2::ones((1, channels)),
            xi: Array2::zeros((1, channels)),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            grad_nu: Array2::zeros((1, channels)),
            grad_xi: Array2::zeros((1, channels)),
            opt_nu: OptState::new((1, channels)),
            opt_xi: OptState::new((1, channels)),
            cache: None,
        }
    }

    fn stats(&self, x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
        let n = (x.nrows() * self.spatial) as f64;
        let s = self.spatial;
        let mut mean = vec![0.0; self.channels];
        let mut var = vec![0.0; self.channels];
        for row in x.axis_iter(Axis(0)) {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += row.slice(ndarray::s![c * s..(c + 1) * s]).sum();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for row in x.axis_iter(Axis(0)) {
            for (c, v) in var.iter_mut().enumerate() {
                let m = mean[c];
                *v += row
                    .slice(ndarray::s![c * s..(c + 1) * s])
                    .iter()
                    .map(|x| (x - m) * (x - m))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    }

    fn normalize(&self, x: &Array2<f64>, mean: &[f64], inv_std: &[f64]) -> Array2<f64> {
        let s = self.spatial;
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                let c = j / s;
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
        out
    }

    fn affine(&self, xhat: &Array2<f64>) -> Array2<f64> {
        let s = self.spatial;
        let mut out = xhat.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, v) in row.iter_mut().enumerate() {
                let c = j / s;
                *v = self.nu[[0, c]] * *v + self.xi[[0, c]];
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.nrows() < 2 {
            return Err(Error::domain("batch norm needs a batch of at least 2 in training"));
        }
        let (mean, var) = self.stats(x);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let xhat = self.normalize(x, &mean, &inv_std);
        let out = self.affine(&xhat);
        let l = self.momentum;
        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - l) * self.running_mean[c] + l * mean[c];
            self.running_var[c] = (1.0 - l) * self.running_var[c] + l * var[c];
        }
        self.cache = Some((xhat, inv_std));
        Ok(out)
    }

    pub fn forward_infer(&self, x: &Array2<f64>) -> Array2<f64> {
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        self.affine(&self.normalize(x, &self.running_mean, &inv_std))
    }

    pub fn backward(&mut self, g: &Array2<f64>) -> Result<Array2<f64>> {
        let (xhat, inv_std) = self
            .cache
            .take()
            .ok_or_else(|| Error::state("batch norm backward without forward"))?;
        let s = self.spatial;
        let n = (g.nrows() * s) as f64;
        let mut sum_g = vec![0.0; self.channels];
        let mut sum_gx = vec![0.0; self.channels];
        Zip::indexed(g).and(&xhat).for_each(|(_, j), &gv, &xh| {
            let c = j / s;
            sum_g[c] += gv;
            sum_gx[c] += gv * xh;
        });
        for c in 0..self.channels {
            self.grad_xi[[0, c]] = sum_g[c];
            self.grad_nu[[0, c]] = sum_gx[c];
        }
        let mut dx = Array2::zeros(g.dim());
        Zip::indexed(&mut dx).and(g).and(&xhat).for_each(|(_, j), d, &gv, &xh| {
            let c = j / s;
            let nu = self.nu[[0, c]];
            // d xhat = g * nu; sums scale by nu as well
            *d = nu * inv_std[c] / n * (n * gv - sum_g[c] - xh * sum_gx[c]);
        });
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub input: Shape,
    pub output: Shape,
    pub size: usize,
    pub stride: usize,
    argmax: Option<Vec<u32>>,
}

impl MaxPool {
    pub fn new(input: Shape, output: Shape, size: usize, stride: usize) -> Self {
        MaxPool {
            input,
            output,
            size,
            stride,
            argmax: None,
        }
    }

    fn run(&self, x: &Array2<f64>, want_idx: bool) -> (Array2<f64>, Vec<u32>) {
        let (c, h, w) = self.input;
        let (_, oh, ow) = self.output;
        let out_len = c * oh * ow;
        let b = x.nrows();
        let mut out = Array2::<f64>::zeros((b, out_len));
        let mut idx = vec![0u32; if want_idx { b * out_len } else { 0 }];
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let in_len = c * h * w;
        let body = |bi: usize, orow: &mut [f64], irow: Option<&mut [u32]>| {
            let src = &xs[bi * in_len..(bi + 1) * in_len];
            let mut irow = irow;
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0usize;
                        for ky in 0..self.size {
                            for kx in 0..self.size {
                                let p = ch * h * w + (oy * self.stride + ky) * w + ox * self.stride + kx;
                                if src[p] > best {
                                    best = src[p];
                                    at = p;
                                }
                            }
                        }
                        let o = ch * oh * ow + oy * ow + ox;
                        orow[o] = best;
                        if let Some(ir) = irow.as_deref_mut() {
                            ir[o] = at as u32;
                        }
                    }
                }
            }
        };
        let ob = out.as_slice_mut().expect("standard layout");
        if want_idx {
            par::for_each_chunk_pair_mut(ob, &mut idx, out_len, |bi, o, i| body(bi, o, Some(i)));
        } else {
            par::for_each_chunk_mut(ob, out_len, |bi, o| body(bi, o, None));
        }
        (out, idx)
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let (out, idx) = self.run(x, true);
        self.argmax = Some(idx);
        out
    }

    pub fn forward_infer(&self, x: &Array2<f64>) -> Array2<f64> {
        self.run(x, false).0
    }

    pub fn backward(&mut self, g: &Array2<f64>) -> Result<Array2<f64>> {
        let idx = self
            .argmax
            .take()
            .ok_or_else(|| Error::state("maxpool backward without forward"))?;
        let in_len = self.input.0 * self.input.1 * self.input.2;
        let out_len = g.ncols();
        let mut dx = Array2::<f64>::zeros((g.nrows(), in_len));
        for (bi, (mut drow, grow)) in dx.axis_iter_mut(Axis(0)).zip(g.axis_iter(Axis(0))).enumerate() {
            for (o, &gv) in grow.iter().enumerate() {
                drow[idx[bi * out_len + o] as usize] += gv;
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActivationKind,
    out: Option<Array2<f64>>,
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    y
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Activation { kind, out: None }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        match self.kind {
            ActivationKind::Relu => x.mapv(|v| v.max(0.0)),
            ActivationKind::Sigmoid => x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            ActivationKind::Softmax => softmax_rows(x),
        }
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let y = self.apply(x);
        self.out = Some(y.clone());
        y
    }

    pub fn backward(&mut self, g: &Array2<f64>) -> Result<Array2<f64>> {
        let y = self
            .out
            .take()
            .ok_or_else(|| Error::state("activation backward without forward"))?;
        Ok(match self.kind {
            ActivationKind::Relu => Zip::from(g).and(&y).map_collect(|&g, &y| if y > 0.0 { g } else { 0.0 }),
            ActivationKind::Sigmoid => Zip::from(g).and(&y).map_collect(|&g, &y| g * y * (1.0 - y)),
            ActivationKind::Softmax => {
                let mut d = Array2::zeros(g.dim());
                for ((mut drow, grow), yrow) in d
                    .axis_iter_mut(Axis(0))
                    .zip(g.axis_iter(Axis(0)))
                    .zip(y.axis_iter(Axis(0)))
                {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    Zip::from(&mut drow)
                        .and(&grow)
                        .and(&yrow)
                        .for_each(|d, &g, &y| *d = y * (g - dot));
                }
                d
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    mask: Option<Array2<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Dropout { rate, mask: None }
    }

    pub fn forward_train<R: Rng>(&mut self, x: &Array2<f64>, rng: &mut R) -> Array2<f64> {
        let keep = 1.0 - self.rate;
        let mask = Array2::from_shape_simple_fn(x.dim(), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let y = x * &mask;
        self.mask = Some(mask);
        y
    }

    pub fn backward(&mut self, g: &Array2<f64>) -> Result<Array2<f64>> {
        let m = self
            .mask
            .take()
            .ok_or_else(|| Error::state("dropout backward without forward"))?;
        Ok(g * &m)
    }
}

/// Geometry of a convolution lowered to a matrix product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.input.0 * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Patch element `(ch, ky, kx)` at output `(oy, ox)` maps to input offset,
    /// or `None` when it falls in the padding.
    #[inline]
    fn src(&self, ch: usize, y: usize, x: usize, ky: usize, kx: usize) -> Option<usize> {
        let (_, h, w) = self.input;
        let iy = (y * self.stride + ky).checked_sub(self.pad)?;
        let ix = (x * self.stride + kx).checked_sub(self.pad)?;
        (iy < h && ix < w).then(|| ch * h * w + iy * w + ix)
    }

    /// `(batch, c*h*w)` → `(batch * positions, patch_len)`.
    pub fn im2col(&self, x: &Array2<f64>) -> Array2<f64> {
        let b = x.nrows();
        let (pl, np) = (self.patch_len(), self.positions());
        let in_len = x.ncols();
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let mut out = Array2::<f64>::zeros((b * np, pl));
        let k = self.kernel;
        par::for_each_chunk_mut(out.as_slice_mut().expect("standard layout"), np * pl, |bi, chunk| {
            let src = &xs[bi * in_len..(bi + 1) * in_len];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = &mut chunk[(oy * self.out_w + ox) * pl..][..pl];
                    let mut j = 0;
                    for ch in 0..self.input.0 {
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some(p) = self.src(ch, oy, ox, ky, kx) {
                                    row[j] = src[p];
                                }
                                j += 1;
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// Adjoint of [`im2col`](Self::im2col).
    pub fn col2im(&self, cols: &Array2<f64>, batch: usize) -> Array2<f64> {
        let (pl, np) = (self.patch_len(), self.positions());
        let in_len = self.input.0 * self.input.1 * self.input.2;
        let cs = cols.as_standard_layout();
        let cs = cs.as_slice().expect("standard layout");
        let mut out = Array2::<f64>::zeros((batch, in_len));
        let k = self.kernel;
        par::for_each_chunk_mut(out.as_slice_mut().expect("standard layout"), in_len, |bi, dst| {
            let block = &cs[bi * np * pl..(bi + 1) * np * pl];
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = &block[(oy * self.out_w + ox) * pl..][..pl];
                    let mut j = 0;
                    for ch in 0..self.input.0 {
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some(p) = self.src(ch, oy, ox, ky, kx) {
                                    dst[p] += row[j];
                                }
                                j += 1;
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// `(batch * positions, filters)` → `(batch, filters * positions)`.
    pub fn to_channel_major(&self, y: &Array2<f64>, batch: usize) -> Array2<f64> {
        let f = y.ncols();
        let np = self.positions();
        let mut out = Array2::<f64>::zeros((batch, f * np));
        for bi in 0..batch {
            for p in 0..np {
                for c in 0..f {
                    out[[bi, c * np + p]] = y[[bi * np + p, c]];
                }
            }
        }
        out
    }

    /// Inverse of [`to_channel_major`](Self::to_channel_major).
    pub fn from_channel_major(&self, g: &Array2<f64>, filters: usize) -> Array2<f64> {
        let batch = g.nrows();
        let np = self.positions();
        let mut out = Array2::<f64>::zeros((batch * np, filters));
        for bi in 0..batch {
            for p in 0..np {
                for c in 0..filters {
                    out[[bi * np + p, c]] = g[[bi, c * np + p]];
                }
            }
        }
        out
    }
}
