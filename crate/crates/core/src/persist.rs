//! `.cimf` model container: a JSON header followed by checksummed blocks of
//! little-endian `f64` payloads. The byte layout is described in
//! `docs/cimf-format.md`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::network::Layer;
use crate::nn::{Backend, Network, NetworkSpec, OptState};
use crate::snn::SnnNetwork;

pub const MAGIC: &[u8; 4] = b"CIMF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    RealWeights = 0,
    Conductances = 1,
    BnStats = 2,
    OptimizerState = 3,
}

impl PayloadKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => PayloadKind::RealWeights,
            1 => PayloadKind::Conductances,
            2 => PayloadKind::BnStats,
            3 => PayloadKind::OptimizerState,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub kind: PayloadKind,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl Block {
    pub fn new(name: impl Into<String>, kind: PayloadKind, dims: Vec<u64>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<u64>() as usize, data.len());
        Block {
            name: name.into(),
            kind,
            dims,
            data,
        }
    }

    fn matrix(name: String, kind: PayloadKind, a: &Array2<f64>) -> Self {
        let (r, c) = a.dim();
        Block::new(name, kind, vec![r as u64, c as u64], a.iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub version: u32,
    pub header: serde_json::Value,
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("JSON value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&crc32fast::hash(&header).to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            let start = out.len();
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.kind as u8);
            out.push(b.dims.len() as u8);
            for d in &b.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.err_at(0, "bad magic (expected \"CIMF\")"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err_at(4, &format!("unsupported version {version} (expected {VERSION})")));
        }
        let hlen = r.u64()? as usize;
        let hstart = r.pos;
        let header = r.take(hlen)?;
        let crc = r.u32()?;
        if crc32fast::hash(header) != crc {
            return Err(r.err_at(hstart, "header checksum mismatch"));
        }
        let header: serde_json::Value =
            serde_json::from_slice(header).map_err(|e| r.err_at(hstart, &format!("header JSON: {e}")))?;
        let count = r.u32()?;
        let mut blocks = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let start = r.pos;
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| r.err_at(start + 2, "block name is not UTF-8"))?
                .to_string();
            let kind_at = r.pos;
            let kind = PayloadKind::from_u8(r.u8()?)
                .ok_or_else(|| r.err_at(kind_at, "unknown payload kind"))?;
            let nd = r.u8()? as usize;
            let mut dims = Vec::with_capacity(nd);
            for _ in 0..nd {
                dims.push(r.u64()?);
            }
            let count = dims
                .iter()
                .try_fold(1u64, |a, &d| a.checked_mul(d))
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| r.err_at(start, "block dimensions overflow"))?;
            let payload = r.take(count.checked_mul(8).ok_or_else(|| r.err_at(start, "payload too large"))?)?;
            let end = r.pos;
            let crc = r.u32()?;
            if crc32fast::hash(&bytes[start..end]) != crc {
                return Err(r.err_at(start, &format!("checksum mismatch in block {name:?}")));
            }
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            blocks.push(Block { name, kind, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, "trailing bytes after last block"));
        }
        Ok(Container { version, header, blocks })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, msg: &str) -> Error {
        Error::Model {
            path: self.path.to_string(),
            message: format!("{msg} at byte offset {offset}"),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(self.err_at(self.bytes.len(), "truncated file")),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Per-layer scalars kept in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerMeta {
    index: usize,
    #[serde(default)]
    adc_full_scale: Option<f64>,
    #[serde(default)]
    array_seed: Option<u64>,
    #[serde(default)]
    read_cycles: u64,
    #[serde(default)]
    write_cycles: u64,
    /// Optimizer step counters, in block order.
    #[serde(default)]
    opt_steps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    network: NetworkSpec,
    backend: Backend,
    seed: u64,
    step: u64,
    layers: Vec<LayerMeta>,
    meta: BTreeMap<String, serde_json::Value>,
}

fn opt_blocks(out: &mut Vec<Block>, name: &str, s: &OptState) {
    out.push(Block::matrix(format!("{name}.m"), PayloadKind::OptimizerState, &s.m));
    out.push(Block::matrix(format!("{name}.v"), PayloadKind::OptimizerState, &s.v));
}

/// Builds the container for `net`. `meta` is free-form information (run
/// summary, provenance) stored verbatim in the header.
pub fn to_container(net: &Network, meta: &BTreeMap<String, serde_json::Value>) -> Container {
    let mut blocks = Vec::new();
    let mut layers = Vec::new();
    for (i, l) in net.layers.iter().enumerate() {
        let p = format!("layer{i}");
        match l {
            Layer::Trainable(t) => {
                let latent = match &t.array {
                    Some(a) if !shadow(net) => a.stored_weights(),
                    _ => t.latent.clone(),
                };
                blocks.push(Block::matrix(format!("{p}.weights"), PayloadKind::RealWeights, &latent));
                blocks.push(Block::matrix(format!("{p}.bias"), PayloadKind::RealWeights, &t.bias));
                let (mut rc, mut wc, mut seed) = (0, 0, None);
                if let Some(a) = &t.array {
                    let dims = vec![t.rows as u64, t.cols as u64];
                    blocks.push(Block::new(format!("{p}.g_pos"), PayloadKind::Conductances, dims.clone(), a.g_pos().to_vec()));
                    if let Some(gn) = a.g_neg() {
                        blocks.push(Block::new(format!("{p}.g_neg"), PayloadKind::Conductances, dims, gn.to_vec()));
                    }
                    (rc, wc) = a.cycles();
                    seed = Some(a.seed());
                }
                if let Some(b) = &t.buffer {
                    blocks.push(Block::matrix(format!("{p}.buffer"), PayloadKind::OptimizerState, b));
                }
                opt_blocks(&mut blocks, &format!("{p}.opt_w"), &t.opt_w);
                opt_blocks(&mut blocks, &format!("{p}.opt_b"), &t.opt_b);
                layers.push(LayerMeta {
                    index: i,
                    adc_full_scale: t.adc_full_scale,
                    array_seed: seed,
                    read_cycles: rc,
                    write_cycles: wc,
                    opt_steps: vec![t.opt_w.t, t.opt_b.t],
                });
            }
            Layer::BatchNorm(bn) => {
                blocks.push(Block::matrix(format!("{p}.nu"), PayloadKind::BnStats, &bn.nu));
                blocks.push(Block::matrix(format!("{p}.xi"), PayloadKind::BnStats, &bn.xi));
                let c = vec![bn.channels as u64];
                blocks.push(Block::new(format!("{p}.running_mean"), PayloadKind::BnStats, c.clone(), bn.running_mean.clone()));
                blocks.push(Block::new(format!("{p}.running_var"), PayloadKind::BnStats, c, bn.running_var.clone()));
                opt_blocks(&mut blocks, &format!("{p}.opt_nu"), &bn.opt_nu);
                opt_blocks(&mut blocks, &format!("{p}.opt_xi"), &bn.opt_xi);
                layers.push(LayerMeta {
                    index: i,
                    adc_full_scale: None,
                    array_seed: None,
                    read_cycles: 0,
                    write_cycles: 0,
                    opt_steps: vec![bn.opt_nu.t, bn.opt_xi.t],
                });
            }
            _ => {}
        }
    }
    let header = Header {
        network: net.spec.clone(),
        backend: net.backend.clone(),
        seed: net.seed,
        step: net.step,
        layers,
        meta: meta.clone(),
    };
    Container {
        version: VERSION,
        header: serde_json::to_value(header).expect("header serializes"),
        blocks,
    }
}

fn shadow(net: &Network) -> bool {
    use crate::crossbar::{UpdateMode, WeightStorage};
    net.backend.crossbar.update_mode == UpdateMode::ResetAndSet
        && net.backend.crossbar.weight_storage == WeightStorage::Shadow
}

fn model_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Model {
        path: path.to_string(),
        message: msg.into(),
    }
}

fn get_matrix(c: &Container, name: &str, shape: (usize, usize), path: &str) -> Result<Array2<f64>> {
    let b = c.block(name).ok_or_else(|| model_err(path, format!("missing block {name:?}")))?;
    let n = shape.0 * shape.1;
    if b.data.len() != n {
        return Err(model_err(
            path,
            format!("block {name:?} has {} values, expected {n}", b.data.len()),
        ));
    }
    Ok(Array2::from_shape_vec(shape, b.data.clone()).expect("length checked"))
}

fn get_vec(c: &Container, name: &str, len: usize, path: &str) -> Result<Vec<f64>> {
    Ok(get_matrix(c, name, (1, len), path)?.into_raw_vec_and_offset().0)
}

fn get_opt(c: &Container, name: &str, shape: (usize, usize), t: u64, path: &str) -> Result<OptState> {
    Ok(OptState {
        m: get_matrix(c, &format!("{name}.m"), shape, path)?,
        v: get_matrix(c, &format!("{name}.v"), shape, path)?,
        t,
    })
}

/// Rebuilds a network from a container. Returns the network and the
/// free-form header metadata.
pub fn from_container(c: &Container, path: &str) -> Result<(Network, BTreeMap<String, serde_json::Value>)> {
    let h: Header = serde_json::from_value(c.header.clone()).map_err(|e| model_err(path, format!("header: {e}")))?;
    let mut net = Network::new(h.network.clone(), h.backend.clone(), h.seed)?;
    net.step = h.step;
    let metas: BTreeMap<usize, &LayerMeta> = h.layers.iter().map(|m| (m.index, m)).collect();
    let noise = h.backend.noise;
    for (i, l) in net.layers.iter_mut().enumerate() {
        let p = format!("layer{i}");
        let m = metas.get(&i);
        let step = |k: usize| m.and_then(|m| m.opt_steps.get(k).copied()).unwrap_or(0);
        match l {
            Layer::Trainable(t) => {
                let shape = (t.rows, t.cols);
                t.latent = get_matrix(c, &format!("{p}.weights"), shape, path)?;
                t.bias = get_matrix(c, &format!("{p}.bias"), (1, t.cols), path)?;
                t.opt_w = get_opt(c, &format!("{p}.opt_w"), shape, step(0), path)?;
                t.opt_b = get_opt(c, &format!("{p}.opt_b"), (1, t.cols), step(1), path)?;
                t.adc_full_scale = m.and_then(|m| m.adc_full_scale);
                if c.block(&format!("{p}.buffer")).is_some() {
                    t.buffer = Some(get_matrix(c, &format!("{p}.buffer"), shape, path)?);
                }
                if let Some(a) = t.array.as_mut() {
                    let n = t.rows * t.cols;
                    let gp = get_vec(c, &format!("{p}.g_pos"), n, path)?;
                    let gn = match a.g_neg() {
                        Some(_) => Some(get_vec(c, &format!("{p}.g_neg"), n, path)?),
                        None => None,
                    };
                    if let Some(seed) = m.and_then(|m| m.array_seed) {
                        if seed != a.seed() {
                            a.set_noise(noise, seed)?;
                        }
                    }
                    a.restore(gp, gn).map_err(|e| model_err(path, format!("{p}: {e}")))?;
                    if let Some(fs) = t.adc_full_scale {
                        a.set_adc_full_scale(fs);
                    }
                    if let Some(m) = m {
                        a.set_cycles(m.read_cycles, m.write_cycles);
                    }
                }
            }
            Layer::BatchNorm(bn) => {
                let ch = bn.channels;
                bn.nu = get_matrix(c, &format!("{p}.nu"), (1, ch), path)?;
                bn.xi = get_matrix(c, &format!("{p}.xi"), (1, ch), path)?;
                bn.running_mean = get_vec(c, &format!("{p}.running_mean"), ch, path)?;
                bn.running_var = get_vec(c, &format!("{p}.running_var"), ch, path)?;
                if bn.running_var.iter().any(|v| *v < 0.0) {
                    return Err(model_err(path, format!("{p}: negative running variance")));
                }
                bn.opt_nu = get_opt(c, &format!("{p}.opt_nu"), (1, ch), step(0), path)?;
                bn.opt_xi = get_opt(c, &format!("{p}.opt_xi"), (1, ch), step(1), path)?;
            }
            _ => {}
        }
    }
    Ok((net, h.meta))
}

pub fn save(net: &Network, path: &Path, meta: &BTreeMap<String, serde_json::Value>) -> Result<()> {
    std::fs::write(path, to_container(net, meta).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Network, BTreeMap<String, serde_json::Value>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let p = path.display().to_string();
    from_container(&Container::from_bytes(&bytes, &p)?, &p)
}

#[derive(Serialize, Deserialize)]
struct SnnHeader {
    model: String,
    inputs: usize,
    params: crate::snn::StdpParams,
    config: crate::snn::SnnConfig,
    meta: BTreeMap<String, serde_json::Value>,
}

/// Container for a trained spiking network: `weights` (inputs x outputs,
/// relative conductance units) and `theta` (adaptive thresholds).
pub fn snn_to_container(net: &SnnNetwork, meta: &BTreeMap<String, serde_json::Value>) -> Container {
    let h = SnnHeader {
        model: "snn".into(),
        inputs: net.inputs(),
        params: net.params.clone(),
        config: net.config.clone(),
        meta: meta.clone(),
    };
    let n = net.outputs() as u64;
    let theta: Vec<f64> = net.neurons().iter().map(|s| s.theta).collect();
    Container {
        version: VERSION,
        header: serde_json::to_value(h).expect("header serializes"),
        blocks: vec![
            Block::new("weights", PayloadKind::RealWeights, vec![net.inputs() as u64, n], net.weights().to_vec()),
            Block::new("theta", PayloadKind::RealWeights, vec![n], theta),
        ],
    }
}

pub fn snn_from_container(c: &Container, path: &str) -> Result<(SnnNetwork, BTreeMap<String, serde_json::Value>)> {
    let h: SnnHeader = serde_json::from_value(c.header.clone()).map_err(|e| model_err(path, format!("header: {e}")))?;
    if h.model != "snn" {
        return Err(model_err(path, format!("model kind {:?} is not snn", h.model)));
    }
    let n = h.config.outputs;
    let w = get_vec(c, "weights", h.inputs * n, path)?;
    let theta = get_vec(c, "theta", n, path)?;
    let net = SnnNetwork::from_state(h.inputs, h.params, h.config, w, &theta).map_err(|e| model_err(path, e.to_string()))?;
    Ok((net, h.meta))
}

pub fn save_snn(net: &SnnNetwork, path: &Path, meta: &BTreeMap<String, serde_json::Value>) -> Result<()> {
    std::fs::write(path, snn_to_container(net, meta).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_snn(path: &Path) -> Result<(SnnNetwork, BTreeMap<String, serde_json::Value>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let p = path.display().to_string();
    snn_from_container(&Container::from_bytes(&bytes, &p)?, &p)
}

/// Whether the container holds a spiking network.
pub fn is_snn(c: &Container) -> bool {
    c.header.get("model").and_then(|m| m.as_str()) == Some("snn")
}

/// Copies every `layer{i}.weights` / `layer{i}.bias` real-weight block of `c`
/// into `net`. Crossbar-backed layers are reprogrammed from the imported
/// values (clipped, quantized, written with reset-and-set). Returns the
/// number of layers imported.
pub fn import_real_weights(net: &mut Network, c: &Container) -> Result<usize> {
    let mut n = 0;
    for (i, l) in net.layers.iter_mut().enumerate() {
        let Layer::Trainable(t) = l else { continue };
        let Some(b) = c.block(&format!("layer{i}.weights")) else { continue };
        if b.kind != PayloadKind::RealWeights {
            return Err(Error::domain(format!("block {:?} is not real_weights", b.name)));
        }
        if b.dims != [t.rows as u64, t.cols as u64] {
            return Err(Error::domain(format!(
                "block {:?} has dims {:?}, layer expects [{}, {}]",
                b.name, b.dims, t.rows, t.cols
            )));
        }
        t.latent = Array2::from_shape_vec((t.rows, t.cols), b.data.clone()).expect("dims checked");
        if let Some(bias) = c.block(&format!("layer{i}.bias")) {
            if bias.data.len() == t.cols {
                t.bias = Array2::from_shape_vec((1, t.cols), bias.data.clone()).expect("len checked");
            }
        }
        n += 1;
    }
    if net.is_crossbar() {
        for t in net.trainables_mut() {
            t.array = None;
        }
        net.program_arrays()?;
    }
    Ok(n)
}
