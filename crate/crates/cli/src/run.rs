//! Experiment drivers behind the `train`, `infer`, `retrain` and `sweep`
//! subcommands.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cimsim::data::{self, Dataset};
use cimsim::nn::train::{self as nntrain, CSV_HEADER};
use cimsim::nn::{Backend, EpochRecord, Network, RunRecord};
use cimsim::persist;
use cimsim::rng::{self, Domain};
use cimsim::snn::{self, SnnNetwork};
use cimsim::{par, Error};
use serde_json::{json, Value};

use crate::config::{Command, DatasetKind, RunConfig};

/// A failed run, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    Config(Error),
    Data(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    fn runtime(e: Error) -> Failure {
        match e {
            Error::Config(_) => Failure::Config(e),
            e => Failure::Runtime(e),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(Error::Config(v)) => {
                writeln!(f, "config error ({} problem{}):", v.len(), if v.len() == 1 { "" } else { "s" })?;
                for m in v {
                    writeln!(f, "  {m}")?;
                }
                Ok(())
            }
            Failure::Config(e) => write!(f, "config error: {e}"),
            Failure::Data(e) => write!(f, "data error: {e}"),
            Failure::Runtime(e) => write!(f, "runtime failure: {e}"),
        }
    }
}

impl std::error::Error for Failure {}

pub type Outcome<T> = Result<T, Failure>;

/// Command-line settings that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub subset: Option<usize>,
    pub mnist_dir: Option<PathBuf>,
    pub cifar_dir: Option<PathBuf>,
}

/// Run-wide options that are not part of the experiment itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Write `0.000` instead of wall time in `metrics.csv`, making the file a
    /// pure function of the config.
    pub no_timing: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
        if let Some(n) = self.subset {
            cfg.dataset.train_subset = Some(n);
        }
        let dir = match cfg.dataset.name {
            DatasetKind::Mnist => &self.mnist_dir,
            DatasetKind::Cifar10 => &self.cifar_dir,
        };
        if let Some(d) = dir {
            cfg.dataset.dir = Some(d.clone());
        }
    }
}

/// Dataset directory: config, then environment, then `data/`.
pub fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    if let Some(d) = &cfg.dataset.dir {
        return d.clone();
    }
    let (var, fallback) = match cfg.dataset.name {
        DatasetKind::Mnist => ("CIMSIM_MNIST_DIR", "data/mnist"),
        DatasetKind::Cifar10 => ("CIMSIM_CIFAR_DIR", "data/cifar-10-batches-bin"),
    };
    std::env::var_os(var).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(fallback))
}

/// Full train and test splits of the configured dataset.
pub fn load_dataset(cfg: &RunConfig) -> Outcome<(Dataset, Dataset)> {
    let dir = dataset_dir(cfg);
    let r = match cfg.dataset.name {
        DatasetKind::Mnist => data::load_mnist(&dir),
        DatasetKind::Cifar10 => data::load_cifar10(&dir),
    };
    r.map_err(Failure::Data)
}

/// Applies the configured subsets.
pub fn select(cfg: &RunConfig, full: &(Dataset, Dataset)) -> Outcome<(Dataset, Dataset)> {
    let pick = |ds: &Dataset, n: Option<usize>, salt: u64| match n {
        Some(n) if n < ds.len() => data::subset(ds, n, cfg.seed ^ salt).map_err(Failure::Config),
        _ => Ok(ds.clone()),
    };
    Ok((pick(&full.0, cfg.dataset.train_subset, 0)?, pick(&full.1, cfg.dataset.test_subset, 1)?))
}

pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name))
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &[u8]) -> Outcome<()> {
    fs::write(path, contents).map_err(|e| io_fail(path, e))
}

struct Metrics {
    path: PathBuf,
    file: fs::File,
    no_timing: bool,
    /// First write error raised inside a training callback.
    failed: Option<Failure>,
}

impl Metrics {
    fn create(dir: &Path, opts: RunOptions) -> Outcome<Metrics> {
        let path = dir.join("metrics.csv");
        let mut file = fs::File::create(&path).map_err(|e| io_fail(&path, e))?;
        writeln!(file, "{CSV_HEADER}").map_err(|e| io_fail(&path, e))?;
        Ok(Metrics {
            path,
            file,
            no_timing: opts.no_timing,
            failed: None,
        })
    }

    fn row(&mut self, r: &EpochRecord) -> Outcome<()> {
        let r = EpochRecord {
            seconds: if self.no_timing { 0.0 } else { r.seconds },
            ..*r
        };
        writeln!(self.file, "{}", r.csv_row()).map_err(|e| io_fail(&self.path, e))
    }

    /// Per-epoch callback: rows are written as training proceeds, with
    /// epoch numbers shifted by `offset`.
    fn record(&mut self, r: &EpochRecord, offset: usize) {
        if self.failed.is_none() {
            let r = EpochRecord {
                epoch: r.epoch + offset,
                ..*r
            };
            self.failed = self.row(&r).err();
        }
    }

    fn check(&mut self) -> Outcome<()> {
        self.failed.take().map_or(Ok(()), Err)
    }

    fn raw(&mut self, line: &str) -> Outcome<()> {
        writeln!(self.file, "{line}").map_err(|e| io_fail(&self.path, e))
    }
}

fn build_network(cfg: &RunConfig) -> Outcome<Network> {
    let net = cfg.network.as_ref().ok_or_else(|| Failure::Config(Error::Config(vec!["network: required".into()])))?;
    let spec = net.spec().map_err(|v| Failure::Config(Error::Config(v)))?;
    let device = cfg
        .device
        .resolve(cfg.crossbar.bit_precision)
        .map_err(|v| Failure::Config(Error::Config(v)))?;
    let backend = Backend {
        kind: cfg.backend,
        crossbar: cfg.crossbar.clone(),
        device,
        noise: cfg.noise(),
    };
    Network::new(spec, backend, cfg.seed).map_err(Failure::runtime)
}

fn save_summary(dir: &Path, summary: &Value) -> Outcome<()> {
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    write_file(&dir.join("summary.json"), format!("{text}\n").as_bytes())
}

fn prepare_dir(cfg: &RunConfig) -> Outcome<PathBuf> {
    let dir = output_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| io_fail(&dir, e))?;
    Ok(dir)
}

fn record_json(rec: &RunRecord) -> Value {
    json!({
        "initial_test_acc": rec.initial_test_acc,
        "final_test_acc": rec.final_test_acc(),
        "epochs": rec.epochs.len(),
        "cells_written": rec.cells_written,
        "pulses": rec.pulses,
    })
}

fn meta(cfg: &RunConfig, command: &str) -> BTreeMap<String, Value> {
    BTreeMap::from([
        ("name".to_string(), json!(cfg.name)),
        ("command".to_string(), json!(command)),
        ("config".to_string(), serde_json::to_value(cfg).expect("config serializes")),
    ])
}

/// Trains the configured network (or spiking network) from scratch.
pub fn run_train(cfg: &RunConfig, full: &(Dataset, Dataset), opts: RunOptions) -> Outcome<Value> {
    let t0 = Instant::now();
    let dir = prepare_dir(cfg)?;
    let (train, test) = select(cfg, full)?;
    let mut metrics = Metrics::create(&dir, opts)?;
    let mut summary = if cfg.snn.is_some() {
        train_snn(cfg, &train, &test, &dir, &mut metrics)?
    } else {
        let mut net = build_network(cfg)?;
        let rec = nntrain::train(&mut net, &train, &test, &cfg.train, |r| metrics.record(r, 0)).map_err(Failure::runtime)?;
        metrics.check()?;
        persist::save(&net, &dir.join("model.cimf"), &meta(cfg, "train")).map_err(Failure::Runtime)?;
        record_json(&rec)
    };
    finish(&mut summary, cfg, "train", t0);
    save_summary(&dir, &summary)?;
    Ok(summary)
}

fn finish(summary: &mut Value, cfg: &RunConfig, command: &str, t0: Instant) {
    let m = summary.as_object_mut().expect("summary is an object");
    m.insert("name".into(), json!(cfg.name));
    m.insert("command".into(), json!(command));
    m.insert("seed".into(), json!(cfg.seed));
    m.insert("wall_seconds".into(), json!(t0.elapsed().as_secs_f64()));
    m.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
}

fn train_snn(cfg: &RunConfig, train: &Dataset, test: &Dataset, dir: &Path, metrics: &mut Metrics) -> Outcome<Value> {
    let s = cfg.snn.as_ref().expect("caller checked");
    let params = s.params().map_err(|v| Failure::Config(Error::Config(v)))?;
    let t0 = Instant::now();
    let r = snn::run_snn(train, test, &params, &s.network, cfg.seed).map_err(Failure::runtime)?;
    let secs = if metrics.no_timing { 0.0 } else { t0.elapsed().as_secs_f64() };
    metrics.raw(&format!(
        "{},,{:.6},{:.6},{:.3}",
        s.network.epochs, r.train_accuracy, r.test_accuracy, secs
    ))?;
    persist::save_snn(&r.network, &dir.join("model.cimf"), &meta(cfg, "train")).map_err(Failure::Runtime)?;
    Ok(json!({
        "train_acc": r.train_accuracy,
        "final_test_acc": r.test_accuracy,
        "assigned_neurons": r.assignments.iter().filter(|a| a.is_some()).count(),
        "events_generated": r.events.generated,
        "events_processed": r.events.processed,
        "output_spikes": r.events.output_spikes,
    }))
}

fn model_path(cfg: &RunConfig) -> PathBuf {
    cfg.infer.model.clone().unwrap_or_else(|| output_dir(cfg).join("model.cimf"))
}

/// Evaluates a saved model on the test split under the configured
/// variation, averaged over `infer.repeats` independent draws.
pub fn run_infer(cfg: &RunConfig, full: &(Dataset, Dataset), opts: RunOptions) -> Outcome<Value> {
    let t0 = Instant::now();
    let path = model_path(cfg);
    let bytes = fs::read(&path).map_err(|e| Failure::Data(Error::Io { path: path.clone(), source: e }))?;
    let shown = path.display().to_string();
    let container = persist::Container::from_bytes(&bytes, &shown).map_err(Failure::Data)?;
    let dir = prepare_dir(cfg)?;
    let (train, test) = select(cfg, full)?;
    let mut metrics = Metrics::create(&dir, opts)?;
    let mut summary = if persist::is_snn(&container) {
        let (mut net, m) = persist::snn_from_container(&container, &shown).map_err(Failure::Data)?;
        let mut ev = snn::EventCounts::default();
        let tr = net.responses(&train, cfg.seed, 1 << 32, &mut ev).map_err(Failure::runtime)?;
        let assignments = snn::assign_classes(&tr, &train.labels, train.classes);
        let te = net.responses(&test, cfg.seed, (1 << 32) + 1, &mut ev).map_err(Failure::runtime)?;
        let acc = snn::accuracy(&te, &test.labels, &assignments, test.classes);
        let secs = if opts.no_timing { 0.0 } else { t0.elapsed().as_secs_f64() };
        metrics.raw(&format!("0,,,{acc:.6},{secs:.3}"))?;
        persist::save_snn(&net, &dir.join("model.cimf"), &m).map_err(Failure::Runtime)?;
        json!({ "final_test_acc": acc, "test_accs": [acc], "repeats": 1 })
    } else {
        let (net, m) = persist::from_container(&container, &shown).map_err(Failure::Data)?;
        let noise = cfg.noise();
        let chunk = cfg.train.eval_chunk;
        let accs = (0..cfg.infer.repeats)
            .map(|r| {
                let mut n = net.clone();
                if net.is_crossbar() {
                    n.set_noise(noise, rng::derive_seed(cfg.seed, Domain::Misc, &[r as u64]))?;
                }
                nntrain::infer(&mut n, &test, chunk)
            })
            .collect::<Result<Vec<f64>, Error>>()
            .map_err(Failure::runtime)?;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let secs = if opts.no_timing { 0.0 } else { t0.elapsed().as_secs_f64() };
        metrics.raw(&format!("0,,,{mean:.6},{secs:.3}"))?;
        persist::save(&net, &dir.join("model.cimf"), &m).map_err(Failure::Runtime)?;
        json!({ "final_test_acc": mean, "test_accs": accs, "repeats": cfg.infer.repeats })
    };
    summary["model"] = json!(shown);
    finish(&mut summary, cfg, "infer", t0);
    save_summary(&dir, &summary)?;
    Ok(summary)
}

/// Trains (or loads) a network, installs `retrain.adc`, measures the
/// accuracy drop and retrains under the new readout.
pub fn run_retrain(cfg: &RunConfig, full: &(Dataset, Dataset), opts: RunOptions) -> Outcome<Value> {
    let t0 = Instant::now();
    if cfg.snn.is_some() {
        return Err(Failure::Config(Error::Config(vec!["snn: retrain is not defined for spiking networks".into()])));
    }
    let dir = prepare_dir(cfg)?;
    let (train, test) = select(cfg, full)?;
    let mut metrics = Metrics::create(&dir, opts)?;
    let (mut net, base) = match &cfg.retrain.model {
        Some(p) => {
            let (mut net, _) = persist::load(p).map_err(Failure::Data)?;
            let acc = nntrain::infer(&mut net, &test, cfg.train.eval_chunk).map_err(Failure::runtime)?;
            (net, json!({ "final_test_acc": acc, "model": p.display().to_string() }))
        }
        None => {
            let mut net = build_network(cfg)?;
            let rec = nntrain::train(&mut net, &train, &test, &cfg.train, |r| metrics.record(r, 0)).map_err(Failure::runtime)?;
            metrics.check()?;
            (net, record_json(&rec))
        }
    };
    let before = base["final_test_acc"].as_f64().unwrap_or(f64::NAN);
    if let Some(adc) = cfg.retrain.adc {
        net.set_adc(Some(adc));
    }
    let tcfg = cfg.retrain.train.clone().unwrap_or_else(|| cfg.train.clone());
    nntrain::calibrate(&mut net, &train, tcfg.calibration_samples).map_err(Failure::runtime)?;
    let first = cfg.train.epochs * usize::from(cfg.retrain.model.is_none());
    let rec = nntrain::retrain(&mut net, &train, &test, &tcfg, |r| metrics.record(r, first)).map_err(Failure::runtime)?;
    metrics.check()?;
    persist::save(&net, &dir.join("model.cimf"), &meta(cfg, "retrain")).map_err(Failure::Runtime)?;
    let mut summary = json!({
        "base": base,
        "base_test_acc": before,
        "degraded_test_acc": rec.initial_test_acc,
        "final_test_acc": rec.final_test_acc(),
        "retrain_epochs": rec.epochs.len(),
        "cells_written": rec.cells_written,
        "pulses": rec.pulses,
    });
    finish(&mut summary, cfg, "retrain", t0);
    save_summary(&dir, &summary)?;
    Ok(summary)
}

/// Runs `sweep.command` once per sweep value. Points run in parallel on the
/// current thread pool, each in its own `point-NNN` subdirectory.
pub fn run_sweep(cfg: &RunConfig, full: &(Dataset, Dataset), opts: RunOptions) -> Outcome<Value> {
    let t0 = Instant::now();
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| Failure::Config(Error::Config(vec!["sweep: section required for the sweep command".into()])))?;
    let dir = prepare_dir(cfg)?;
    let mut points = Vec::with_capacity(sweep.values.len());
    for (i, &x) in sweep.values.iter().enumerate() {
        let mut p = cfg.with_value(&sweep.axis, x).map_err(Failure::Config)?;
        p.sweep = None;
        p.output = Some(dir.join(format!("point-{i:03}")));
        p.name = format!("{}-{i:03}", cfg.name);
        points.push(p);
    }
    let results = par::map_slice(&points, |p| match sweep.command {
        Command::Train => run_train(p, full, opts),
        Command::Infer => run_infer(p, full, opts),
        Command::Retrain => run_retrain(p, full, opts),
    });
    let mut csv = String::from("value,final_test_acc\n");
    let mut rows = Vec::new();
    for (x, r) in sweep.values.iter().zip(results) {
        let s = r?;
        let acc = s["final_test_acc"].as_f64().unwrap_or(f64::NAN);
        csv.push_str(&format!("{x},{acc:.6}\n"));
        rows.push(json!({ "value": x, "final_test_acc": acc }));
    }
    write_file(&dir.join("sweep.csv"), csv.as_bytes())?;
    let mut summary = json!({ "axis": sweep.axis, "points": rows });
    finish(&mut summary, cfg, "sweep", t0);
    save_summary(&dir, &summary)?;
    Ok(summary)
}

/// Reloads a spiking network saved by [`run_train`].
pub fn load_snn(path: &Path) -> Outcome<SnnNetwork> {
    persist::load_snn(path).map(|(n, _)| n).map_err(Failure::Data)
}
