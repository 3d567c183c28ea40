//! Unsupervised spiking network: Poisson-encoded inputs, all-to-all STDP
//! synapses, leaky integrate-and-fire outputs with winner-take-all inhibition
//! and adaptive thresholds.
//!
//! Synaptic weights live in the device's relative conductance-change units
//! (`ΔG/G`) and are bounded by `[w_min_rel, w_max_rel]`. Device STDP time
//! constants are rescaled onto the simulated presentation time base; the
//! ratio `tau_minus / tau_plus` is preserved.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Descriptive pulse metadata. Not used by the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    /// Volts.
    pub voltage: f64,
    /// Seconds.
    pub width: f64,
}

/// STDP fit of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdpParams {
    pub a_plus: f64,
    pub a_minus: f64,
    /// Seconds.
    pub tau_plus: f64,
    /// Seconds.
    pub tau_minus: f64,
    pub w_max_rel: f64,
    pub w_min_rel: f64,
    #[serde(default)]
    pub material: Option<String>,
    #[serde(default)]
    pub dynamic_range: Option<f64>,
    #[serde(default)]
    pub on_off_ratio: Option<f64>,
    #[serde(default)]
    pub set_voltage: Option<f64>,
    #[serde(default)]
    pub reset_voltage: Option<f64>,
    #[serde(default)]
    pub pre_pulse: Option<Pulse>,
    #[serde(default)]
    pub post_pulse: Option<Pulse>,
}

impl StdpParams {
    pub fn validate(&self) -> Result<()> {
        let v = self.violations("stdp");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.tau_plus > 0.0 && self.tau_plus.is_finite()) {
            v.push(format!("{prefix}.tau_plus: {} must be > 0", self.tau_plus));
        }
        if !(self.tau_minus > 0.0 && self.tau_minus.is_finite()) {
            v.push(format!("{prefix}.tau_minus: {} must be > 0", self.tau_minus));
        }
        if !(self.a_plus > 0.0 && self.a_plus.is_finite()) {
            v.push(format!("{prefix}.a_plus: {} must be > 0", self.a_plus));
        }
        if !(self.a_minus < 0.0 && self.a_minus.is_finite()) {
            v.push(format!("{prefix}.a_minus: {} must be < 0", self.a_minus));
        }
        if !(self.w_min_rel >= 0.0 && self.w_min_rel < self.w_max_rel && self.w_max_rel.is_finite()) {
            v.push(format!(
                "{prefix}.w_min_rel: need 0 <= w_min_rel ({}) < w_max_rel ({})",
                self.w_min_rel, self.w_max_rel
            ));
        }
        v
    }

    /// Largest over smallest resolvable weight change. Changes below
    /// `w_min_rel` are below the device's resolution.
    pub fn dynamic_range(&self) -> f64 {
        self.a_plus.max(-self.a_minus) / self.w_min_rel
    }

    /// `|dt|` beyond which the potentiation (resp. depression) branch falls
    /// below `w_min_rel`, in the device's own time base.
    pub fn window(&self) -> (f64, f64) {
        let cut = |a: f64, tau: f64| {
            if a.abs() > self.w_min_rel && self.w_min_rel > 0.0 {
                tau * (a.abs() / self.w_min_rel).ln()
            } else if self.w_min_rel == 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        };
        (cut(self.a_plus, self.tau_plus), cut(self.a_minus, self.tau_minus))
    }

    /// Copy with both time constants multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> StdpParams {
        StdpParams {
            tau_plus: self.tau_plus * factor,
            tau_minus: self.tau_minus * factor,
            ..self.clone()
        }
    }
}

const BUILTIN_PRESETS: &str = include_str!("../presets/snn.json");

pub fn builtin_presets() -> BTreeMap<String, StdpParams> {
    serde_json::from_str(BUILTIN_PRESETS).expect("bundled SNN presets are valid JSON")
}

pub fn builtin_preset(name: &str) -> Option<StdpParams> {
    builtin_presets().remove(name)
}

/// Relative weight change for `dt = t_post - t_pre` (seconds). Simultaneous
/// spikes count as causal.
pub fn stdp_delta(dt: f64, p: &StdpParams) -> f64 {
    if dt >= 0.0 {
        p.a_plus * (-dt / p.tau_plus).exp()
    } else {
        p.a_minus * (dt / p.tau_minus).exp()
    }
}

/// `w` updated by `rate * stdp_delta(dt)`, kept inside the device bounds.
pub fn apply_stdp(w: f64, dt: f64, rate: f64, p: &StdpParams) -> f64 {
    (w + rate * stdp_delta(dt, p)).clamp(p.w_min_rel, p.w_max_rel)
}

/// Poisson spike times (seconds, ascending) for each pixel, firing at
/// `intensity * max_rate` Hz over `[0, window)`.
pub fn encode_rate<R: Rng + ?Sized>(
    image: &[f64],
    max_rate: f64,
    window: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if !(max_rate >= 0.0 && window >= 0.0 && max_rate.is_finite() && window.is_finite()) {
        return Err(Error::domain(format!("rate {max_rate} Hz and window {window} s must be finite and >= 0")));
    }
    let mut trains = Vec::with_capacity(image.len());
    for (i, &x) in image.iter().enumerate() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::domain(format!("pixel {i} intensity {x} outside [0, 1]")));
        }
        let rate = x * max_rate;
        let mut train = Vec::new();
        if rate > 0.0 {
            let exp = Exp::new(rate).expect("positive rate");
            let mut t = exp.sample(rng);
            while t < window {
                train.push(t);
                t += exp.sample(rng);
            }
        }
        trains.push(train);
    }
    Ok(trains)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnnConfig {
    pub outputs: usize,
    pub epochs: usize,
    /// Presentation window per image, seconds.
    pub window: f64,
    /// Input rate for a pixel of intensity 1, Hz.
    pub max_rate: f64,
    /// Added to `max_rate` when an image draws fewer than `min_spikes` output spikes.
    pub rate_boost: f64,
    pub min_spikes: usize,
    pub max_boosts: usize,
    /// Membrane time constant, seconds.
    pub tau_membrane: f64,
    /// Seconds.
    pub refractory: f64,
    /// Baseline threshold in units of a full-scale (`w_max_rel`) input spike.
    pub threshold: f64,
    /// Threshold increment per output spike while learning.
    pub theta_plus: f64,
    /// Adaptive threshold decay constant, seconds of simulated time.
    pub tau_theta: f64,
    /// Simulated value of the device's `tau_plus`. `None` keeps the device time base.
    pub network_tau_plus: Option<f64>,
    /// Scale on the STDP weight change.
    pub learning_rate: f64,
    /// Per-neuron weight sum after each training image, as a fraction of
    /// `inputs * w_max_rel`. `None` disables normalization.
    pub weight_norm: Option<f64>,
    /// Initial weights are uniform on `[w_min, w_min + init_scale * (w_max - w_min)]`.
    pub init_scale: f64,
}

impl Default for SnnConfig {
    fn default() -> Self {
        SnnConfig {
            outputs: 100,
            epochs: 1,
            window: 0.35,
            max_rate: 63.75,
            rate_boost: 32.0,
            min_spikes: 5,
            max_boosts: 4,
            tau_membrane: 0.1,
            refractory: 0.005,
            threshold: 20.0,
            theta_plus: 0.05,
            tau_theta: 1e4,
            network_tau_plus: Some(0.02),
            learning_rate: 0.01,
            weight_norm: Some(0.1),
            init_scale: 0.3,
        }
    }
}

impl SnnConfig {
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        let mut positive = |name: &str, x: f64| {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{prefix}.{name}: {x} must be > 0"));
            }
        };
        positive("window", self.window);
        positive("max_rate", self.max_rate);
        positive("tau_membrane", self.tau_membrane);
        positive("threshold", self.threshold);
        positive("tau_theta", self.tau_theta);
        positive("learning_rate", self.learning_rate);
        positive("init_scale", self.init_scale);
        if let Some(t) = self.network_tau_plus {
            positive("network_tau_plus", t);
        }
        if let Some(n) = self.weight_norm {
            positive("weight_norm", n);
        }
        for (name, x) in [
            ("rate_boost", self.rate_boost),
            ("refractory", self.refractory),
            ("theta_plus", self.theta_plus),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("{prefix}.{name}: {x} must be >= 0"));
            }
        }
        if self.outputs == 0 {
            v.push(format!("{prefix}.outputs: must be >= 1"));
        }
        v
    }
}

/// One output neuron.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifNeuronState {
    pub potential: f64,
    /// Adaptive part of the threshold, never negative.
    pub theta: f64,
    /// Simulated time at which the refractory period ends.
    pub refractory_until: f64,
}

impl LifNeuronState {
    fn rest() -> Self {
        LifNeuronState {
            potential: 0.0,
            theta: 0.0,
            refractory_until: f64::NEG_INFINITY,
        }
    }

    pub fn threshold(&self, baseline: f64) -> f64 {
        baseline + self.theta
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Input(u32),
    Output(u32),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Reversed so the max-heap pops the earliest event, then the earliest queued.
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

/// Spike and event tallies of one presentation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventCounts {
    pub generated: u64,
    pub processed: u64,
    pub input_spikes: u64,
    pub output_spikes: u64,
}

impl std::ops::AddAssign for EventCounts {
    fn add_assign(&mut self, o: Self) {
        self.generated += o.generated;
        self.processed += o.processed;
        self.input_spikes += o.input_spikes;
        self.output_spikes += o.output_spikes;
    }
}

/// Weights and neuron state of a 784 x N (in general `inputs x N`) network.
#[derive(Debug, Clone)]
pub struct SnnNetwork {
    pub params: StdpParams,
    pub config: SnnConfig,
    inputs: usize,
    /// Input-major: `weights[i * outputs + j]`.
    weights: Vec<f64>,
    neurons: Vec<LifNeuronState>,
    /// STDP parameters on the simulated time base.
    sim: StdpParams,
    window: (f64, f64),
}

impl SnnNetwork {
    pub fn new(inputs: usize, params: StdpParams, config: SnnConfig, seed: u64) -> Result<Self> {
        params.validate()?;
        let v = config.violations("snn");
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        if inputs == 0 {
            return Err(Error::domain("network needs at least one input"));
        }
        let n = config.outputs;
        let mut rng = rng::stream(seed, Domain::Snn, &[0]);
        let span = config.init_scale.min(1.0) * (params.w_max_rel - params.w_min_rel);
        let weights = (0..inputs * n)
            .map(|_| params.w_min_rel + span * rng.random::<f64>())
            .collect();
        let sim = match config.network_tau_plus {
            Some(t) => params.rescaled(t / params.tau_plus),
            None => params.clone(),
        };
        let window = sim.window();
        let mut net = SnnNetwork {
            params,
            config,
            inputs,
            weights,
            neurons: vec![LifNeuronState::rest(); n],
            sim,
            window,
        };
        net.normalize();
        Ok(net)
    }

    /// Rebuilds a trained network from its weights (input-major) and
    /// adaptive thresholds.
    pub fn from_state(
        inputs: usize,
        params: StdpParams,
        config: SnnConfig,
        weights: Vec<f64>,
        theta: &[f64],
    ) -> Result<Self> {
        let mut net = SnnNetwork::new(inputs, params, config, 0)?;
        if weights.len() != net.weights.len() || theta.len() != net.neurons.len() {
            return Err(Error::domain(format!(
                "state sizes {} / {} do not match a {}x{} network",
                weights.len(),
                theta.len(),
                inputs,
                net.neurons.len()
            )));
        }
        let (lo, hi) = (net.params.w_min_rel, net.params.w_max_rel);
        if weights.iter().any(|w| !(lo..=hi).contains(w)) || theta.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::domain("weights outside device bounds or negative thresholds"));
        }
        net.weights = weights;
        for (n, &t) in net.neurons.iter_mut().zip(theta) {
            n.theta = t;
        }
        Ok(net)
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.config.outputs
    }

    pub fn weight(&self, input: usize, output: usize) -> f64 {
        self.weights[input * self.config.outputs + output]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn neurons(&self) -> &[LifNeuronState] {
        &self.neurons
    }

    fn normalize(&mut self) {
        let Some(frac) = self.config.weight_norm else {
            return;
        };
        let n = self.config.outputs;
        let target = frac * self.inputs as f64 * self.params.w_max_rel;
        let (lo, hi) = (self.params.w_min_rel, self.params.w_max_rel);
        for j in 0..n {
            let sum: f64 = (0..self.inputs).map(|i| self.weights[i * n + j]).sum();
            if sum <= 0.0 {
                continue;
            }
            let k = target / sum;
            for i in 0..self.inputs {
                let w = &mut self.weights[i * n + j];
                *w = (*w * k).clamp(lo, hi);
            }
        }
    }

    /// Presents one image and returns per-neuron spike counts. With `learn`
    /// set, STDP and threshold adaptation are active. If the image draws
    /// fewer than `min_spikes` output spikes, it is presented again at a
    /// boosted rate, at most `max_boosts` times.
    pub fn present(
        &mut self,
        image: &[f64],
        learn: bool,
        seed: u64,
        coords: &[u64],
        counts: &mut EventCounts,
    ) -> Result<Vec<u32>> {
        if image.len() != self.inputs {
            return Err(Error::domain(format!(
                "image has {} pixels, network has {} inputs",
                image.len(),
                self.inputs
            )));
        }
        let mut rate = self.config.max_rate;
        let mut attempt = 0u64;
        loop {
            let mut c = coords.to_vec();
            c.push(attempt);
            let mut rng = rng::stream(seed, Domain::Spikes, &c);
            let trains = encode_rate(image, rate, self.config.window, &mut rng)?;
            let spikes = self.simulate(&trains, learn, counts);
            let total: u32 = spikes.iter().sum();
            if total as usize >= self.config.min_spikes || attempt as usize >= self.config.max_boosts {
                if learn {
                    self.normalize();
                }
                return Ok(spikes);
            }
            rate += self.config.rate_boost;
            attempt += 1;
        }
    }

    fn simulate(&mut self, trains: &[Vec<f64>], learn: bool, counts: &mut EventCounts) -> Vec<u32> {
        let n = self.config.outputs;
        let cfg = &self.config;
        let (lo, hi) = (self.params.w_min_rel, self.params.w_max_rel);
        let gain = 1.0 / self.params.w_max_rel;
        let eta = cfg.learning_rate;
        let (win_p, win_d) = self.window;

        let mut heap = BinaryHeap::new();
        let mut seq = 0u64;
        for (i, train) in trains.iter().enumerate() {
            for &t in train {
                heap.push(Event {
                    time: t,
                    seq,
                    kind: EventKind::Input(i as u32),
                });
                seq += 1;
            }
        }
        counts.generated += seq;
        counts.input_spikes += seq;

        // Potentials are kept as u_j = v_j * e^(t / tau) so that leaking
        // costs nothing between events.
        let tau = cfg.tau_membrane;
        let mut u = vec![0.0; n];
        for nrn in &mut self.neurons {
            nrn.refractory_until = f64::NEG_INFINITY;
        }
        let mut pre_time = vec![f64::NEG_INFINITY; self.inputs];
        let mut post_time = vec![f64::NEG_INFINITY; n];
        let mut spikes = vec![0u32; n];
        let mut last_t = 0.0;

        while let Some(ev) = heap.pop() {
            counts.processed += 1;
            let t = ev.time;
            last_t = t;
            match ev.kind {
                EventKind::Input(i) => {
                    let i = i as usize;
                    let row = &mut self.weights[i * n..(i + 1) * n];
                    if learn {
                        // Nearest-neighbour pairing: only the first input
                        // spike after an output spike depresses.
                        let last_pre = pre_time[i];
                        for (j, w) in row.iter_mut().enumerate() {
                            let dt = post_time[j] - t;
                            if post_time[j] > last_pre && -dt <= win_d {
                                *w = (*w + eta * stdp_delta(dt, &self.sim)).clamp(lo, hi);
                            }
                        }
                    }
                    pre_time[i] = t;
                    let grow = (t / tau).exp();
                    let shrink = 1.0 / grow;
                    let mut winner: Option<(usize, f64)> = None;
                    for (j, nrn) in self.neurons.iter().enumerate() {
                        if t < nrn.refractory_until {
                            continue;
                        }
                        u[j] += row[j] * gain * grow;
                        let over = u[j] * shrink - nrn.threshold(cfg.threshold);
                        if over >= 0.0 && winner.is_none_or(|(_, best)| over > best) {
                            winner = Some((j, over));
                        }
                    }
                    if let Some((j, _)) = winner {
                        let nrn = &mut self.neurons[j];
                        u[j] = 0.0;
                        nrn.refractory_until = t + cfg.refractory;
                        if learn {
                            nrn.theta += cfg.theta_plus;
                        }
                        heap.push(Event {
                            time: t,
                            seq,
                            kind: EventKind::Output(j as u32),
                        });
                        seq += 1;
                        counts.generated += 1;
                    }
                }
                EventKind::Output(j) => {
                    let j = j as usize;
                    spikes[j] += 1;
                    counts.output_spikes += 1;
                    u.iter_mut().for_each(|x| *x = 0.0);
                    if learn {
                        for (i, &tp) in pre_time.iter().enumerate() {
                            let dt = t - tp;
                            if dt <= win_p {
                                let w = &mut self.weights[i * n + j];
                                *w = (*w + eta * stdp_delta(dt, &self.sim)).clamp(lo, hi);
                            }
                        }
                    }
                    post_time[j] = t;
                }
            }
        }
        let shrink = (-last_t / tau).exp();
        for (nrn, &x) in self.neurons.iter_mut().zip(&u) {
            nrn.potential = x * shrink;
        }
        if learn {
            let k = (-cfg.window / cfg.tau_theta).exp();
            for nrn in &mut self.neurons {
                nrn.theta *= k;
            }
        }
        spikes
    }

    /// Spike counts for every image of `ds`, learning disabled.
    pub fn responses(&mut self, ds: &Dataset, seed: u64, pass: u64, counts: &mut EventCounts) -> Result<Vec<Vec<u32>>> {
        (0..ds.len())
            .map(|k| {
                let img = ds.images.row(k);
                let img = img.as_slice().expect("dataset rows are contiguous");
                self.present(img, false, seed, &[pass, k as u64], counts)
            })
            .collect()
    }
}

/// Class each neuron responds to most (mean spikes per class image). Neurons
/// that never fire stay unassigned.
pub fn assign_classes(responses: &[Vec<u32>], labels: &[u8], classes: usize) -> Vec<Option<u8>> {
    let n = responses.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; classes]; n];
    let mut per_class = vec![0usize; classes];
    for (r, &l) in responses.iter().zip(labels) {
        per_class[l as usize] += 1;
        for (j, &s) in r.iter().enumerate() {
            sums[j][l as usize] += s as f64;
        }
    }
    sums.iter()
        .map(|row| {
            let mut best: Option<(u8, f64)> = None;
            for (c, &s) in row.iter().enumerate() {
                if per_class[c] == 0 || s == 0.0 {
                    continue;
                }
                let mean = s / per_class[c] as f64;
                if best.is_none_or(|(_, b)| mean > b) {
                    best = Some((c as u8, mean));
                }
            }
            best.map(|(c, _)| c)
        })
        .collect()
}

/// Majority vote: the class whose assigned neurons fire most on average.
/// Ties and silent responses go to the lowest class index.
pub fn classify(response: &[u32], assignments: &[Option<u8>], classes: usize) -> u8 {
    let mut sum = vec![0.0; classes];
    let mut members = vec![0usize; classes];
    for (&s, a) in response.iter().zip(assignments) {
        if let Some(c) = *a {
            sum[c as usize] += s as f64;
            members[c as usize] += 1;
        }
    }
    let mut best = (0u8, f64::NEG_INFINITY);
    for c in 0..classes {
        let score = if members[c] == 0 { 0.0 } else { sum[c] / members[c] as f64 };
        if score > best.1 {
            best = (c as u8, score);
        }
    }
    best.0
}

pub fn accuracy(responses: &[Vec<u32>], labels: &[u8], assignments: &[Option<u8>], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = responses
        .iter()
        .zip(labels)
        .filter(|(r, &l)| classify(r, assignments, classes) == l)
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone)]
pub struct SnnReport {
    pub assignments: Vec<Option<u8>>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub events: EventCounts,
    pub network: SnnNetwork,
}

/// Trains on `train` for `config.epochs` passes, assigns classes from the
/// training responses, then classifies `test`.
pub fn run_snn(
    train: &Dataset,
    test: &Dataset,
    params: &StdpParams,
    config: &SnnConfig,
    seed: u64,
) -> Result<SnnReport> {
    if config.outputs < train.classes {
        return Err(Error::domain(format!(
            "{} output neurons cannot cover {} classes",
            config.outputs, train.classes
        )));
    }
    let inputs = train.images.ncols();
    let mut net = SnnNetwork::new(inputs, params.clone(), config.clone(), seed)?;
    let mut events = EventCounts::default();
    for epoch in 0..config.epochs {
        let order = crate::data::batches(train.len(), train.len(), seed, epoch as u64)?.concat();
        for (step, &k) in order.iter().enumerate() {
            let img = train.images.row(k);
            let img = img.as_slice().expect("dataset rows are contiguous");
            net.present(img, true, seed, &[epoch as u64, step as u64], &mut events)?;
        }
        log::info!("snn epoch {} done, {} output spikes so far", epoch + 1, events.output_spikes);
    }
    let label_pass = 1 << 32;
    let train_resp = net.responses(train, seed, label_pass, &mut events)?;
    let assignments = assign_classes(&train_resp, &train.labels, train.classes);
    let train_accuracy = accuracy(&train_resp, &train.labels, &assignments, train.classes);
    let test_resp = net.responses(test, seed, label_pass + 1, &mut events)?;
    let test_accuracy = accuracy(&test_resp, &test.labels, &assignments, test.classes);
    Ok(SnnReport {
        assignments,
        train_accuracy,
        test_accuracy,
        events,
        network: net,
    })
}
