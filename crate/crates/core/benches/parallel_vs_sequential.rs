//! Single worker against the default pool on the hot paths. Build with
//! `--no-default-features` to time the sequential code path instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::Rng;

use cimsim::crossbar::{CrossbarConfig, NoiseModel, SynapseArray};
use cimsim::data::{Dataset, Split};
use cimsim::device::{self, DeviceParams};
use cimsim::nn::{self, Backend, BackendKind, Network, NetworkSpec, TrainConfig};
use cimsim::par;
use cimsim::rng::{self, Domain};
use cimsim::variation::VariationSpec;

fn pools() -> Vec<(&'static str, usize)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![("sequential", 1), ("parallel", all)]
}

fn random(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, Domain::Misc, &[]);
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(lo..hi))
}

fn noisy() -> NoiseModel {
    NoiseModel {
        c2c: VariationSpec::normal(0.02),
        ..NoiseModel::ideal()
    }
}

fn rram(bits: u32) -> DeviceParams {
    device::builtin_preset("rram-ni-hfo2-tin")
        .unwrap()
        .resolve(device::default_p_max(bits))
        .unwrap()
}

fn mac(c: &mut Criterion) {
    let cfg = CrossbarConfig {
        bit_precision: 4,
        tile_rows: 128,
        ..CrossbarConfig::default()
    };
    let mut a = SynapseArray::new(784, 200, rram(4), &cfg, noisy(), 1, 0).unwrap();
    let q = a.quantizer();
    a.write_weights(random(784, 200, -1.0, 1.0, 2).mapv(|w| q.quantize(w)).view(), None)
        .unwrap();
    let x = random(100, 784, 0.0, 1.0, 3);
    let mut g = c.benchmark_group("mac_784x200_batch100");
    for (name, threads) in pools() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| par::with_threads(t, || a.mac_batch(x.view()).unwrap()))
        });
    }
    g.finish();
}

fn write(c: &mut Criterion) {
    let cfg = CrossbarConfig {
        bit_precision: 4,
        ..CrossbarConfig::default()
    };
    let targets = [random(784, 200, -1.0, 1.0, 4), random(784, 200, -1.0, 1.0, 5)];
    let mut g = c.benchmark_group("write_784x200");
    for (name, threads) in pools() {
        let mut a = SynapseArray::new(784, 200, rram(4), &cfg, noisy(), 1, 0).unwrap();
        let mut k = 0;
        g.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| {
                k ^= 1;
                par::with_threads(t, || a.write_weights(targets[k].view(), None).unwrap())
            })
        });
    }
    g.finish();
}

fn epoch(c: &mut Criterion) {
    let mut r = rng::stream(6, Domain::Misc, &[]);
    let images = random(1000, 784, 0.0, 1.0, 7);
    let labels = (0..1000).map(|_| r.random_range(0..10u8)).collect();
    let ds = Dataset::new(images, labels, (1, 28, 28), 10, Split::Train).unwrap();
    let backend = Backend {
        kind: BackendKind::Crossbar,
        crossbar: CrossbarConfig {
            bit_precision: 1,
            ..CrossbarConfig::default()
        },
        device: rram(1),
        noise: noisy(),
    };
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 100,
        learning_rate: 0.005,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("mlp_epoch_1000");
    g.sample_size(10);
    for (name, threads) in pools() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| {
                let spec = NetworkSpec::preset("mlp_784_200_10", true).unwrap();
                let mut net = Network::new(spec, backend.clone(), 1).unwrap();
                par::with_threads(t, || nn::train(&mut net, &ds, &ds, &cfg, |_| {}).unwrap())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, mac, write, epoch);
criterion_main!(benches);
