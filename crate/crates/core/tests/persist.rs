use std::collections::BTreeMap;

use cimsim::crossbar::{CrossbarConfig, NoiseModel};
use cimsim::data::{Dataset, Split};
use cimsim::device::{self, DeviceParams};
use cimsim::nn::network::Layer;
use cimsim::nn::{self, ActivationKind, Backend, BackendKind, LayerSpec, Network, NetworkSpec, TrainConfig};
use cimsim::persist::{self, Block, Container, PayloadKind};
use cimsim::rng::{self, Domain};
use cimsim::snn::{builtin_preset, SnnConfig, SnnNetwork};
use cimsim::Error;
use ndarray::Array2;
use rand::Rng;

fn crossbar(bits: u32) -> Backend {
    Backend {
        kind: BackendKind::Crossbar,
        crossbar: CrossbarConfig {
            bit_precision: bits,
            ..CrossbarConfig::default()
        },
        device: DeviceParams::new(1.04e-6, 5.60e-8, 1.0, 100.0, 100.0, device::default_p_max(bits)).unwrap(),
        noise: NoiseModel::ideal(),
    }
}

fn spec() -> NetworkSpec {
    NetworkSpec {
        input: (1, 4, 4),
        layers: vec![
            LayerSpec::Dense { units: 12, bias: true },
            LayerSpec::BatchNorm,
            LayerSpec::Activation {
                function: ActivationKind::Relu,
            },
            LayerSpec::Dense { units: 3, bias: true },
            LayerSpec::Activation {
                function: ActivationKind::Softmax,
            },
        ],
        init_gain: 1.0,
    }
}

fn data(n: usize, seed: u64) -> Dataset {
    let mut r = rng::stream(seed, Domain::Misc, &[]);
    let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
    let images = Array2::from_shape_fn((n, 16), |(i, k)| {
        let on = k % 3 == labels[i] as usize;
        if on { r.random_range(0.5..1.0) } else { r.random_range(0.0..0.4) }
    });
    Dataset::new(images, labels, (1, 4, 4), 3, Split::Train).unwrap()
}

fn trained() -> Network {
    let ds = data(60, 1);
    let mut net = Network::new(spec(), crossbar(4), 7).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 10,
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    nn::train(&mut net, &ds, &ds, &cfg, |_| {}).unwrap();
    net
}

fn meta() -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([("note".to_string(), serde_json::json!("round trip"))])
}

#[test]
fn save_and_load_are_bit_exact() {
    let mut net = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cimf");
    persist::save(&net, &path, &meta()).unwrap();
    let (mut back, m) = persist::load(&path).unwrap();
    assert_eq!(m.get("note"), meta().get("note"));
    let first = std::fs::read(&path).unwrap();
    let again = persist::to_container(&back, &meta()).to_bytes();
    assert_eq!(first, again);
    let ds = data(30, 2);
    let a = net.predict(&ds.images, 10).unwrap();
    let b = back.predict(&ds.images, 10).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corrupted_payload_is_a_checksum_error() {
    let bytes = persist::to_container(&trained(), &meta()).to_bytes();
    let mut bad = bytes.clone();
    let k = bad.len() - 12;
    bad[k] ^= 0x40;
    match Container::from_bytes(&bad, "m.cimf") {
        Err(Error::Model { path, message }) => {
            assert_eq!(path, "m.cimf");
            assert!(message.contains("checksum"), "{message}");
        }
        other => panic!("expected checksum error, got {other:?}"),
    }
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(Container::from_bytes(&bad, "m.cimf").is_err());
    assert!(Container::from_bytes(&bytes[..bytes.len() - 1], "m.cimf").is_err());
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(Container::from_bytes(&bad, "m.cimf").is_err());
}

#[test]
fn hand_built_container_round_trips() {
    let c = Container {
        version: persist::VERSION,
        header: serde_json::json!({"model": "test"}),
        blocks: vec![
            Block::new("a", PayloadKind::BnStats, vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]),
            Block::new("empty", PayloadKind::OptimizerState, vec![0], vec![]),
        ],
    };
    let bytes = c.to_bytes();
    assert_eq!(&bytes[..4], persist::MAGIC);
    let back = Container::from_bytes(&bytes, "x").unwrap();
    assert_eq!(back, c);
    assert_eq!(back.block("a").unwrap().data[1].to_bits(), (-0.0f64).to_bits());
}

#[test]
fn imported_weights_land_on_the_quantizer_grid() {
    let mut net = Network::new(spec(), crossbar(4), 3).unwrap();
    let mut r = rng::stream(9, Domain::Misc, &[]);
    let mut c = persist::to_container(&net, &BTreeMap::new());
    let mut imported = BTreeMap::new();
    for b in c.blocks.iter_mut().filter(|b| b.name.ends_with(".weights")) {
        b.data.iter_mut().for_each(|w| *w = r.random_range(-1.5..1.5));
        imported.insert(b.name.clone(), b.data.clone());
    }
    assert_eq!(persist::import_real_weights(&mut net, &c).unwrap(), 2);
    for (i, l) in net.layers.iter().enumerate() {
        let Layer::Trainable(t) = l else { continue };
        let a = t.array.as_ref().unwrap();
        let q = a.quantizer();
        let src = &imported[&format!("layer{i}.weights")];
        for (got, &w) in a.stored_weights().iter().zip(src) {
            let want = q.quantize(w);
            assert!((got - want).abs() <= 0.5 * q.step() + 1e-12, "layer {i}: {w} -> {got}, grid {want}");
        }
    }
}

#[test]
fn import_rejects_mismatched_shapes() {
    let mut net = Network::new(spec(), crossbar(4), 3).unwrap();
    let c = Container {
        version: persist::VERSION,
        header: serde_json::json!({}),
        blocks: vec![Block::new("layer0.weights", PayloadKind::RealWeights, vec![3, 3], vec![0.0; 9])],
    };
    assert!(persist::import_real_weights(&mut net, &c).is_err());
}

#[test]
fn spiking_network_round_trips() {
    let p = builtin_preset("snn-pt-hfo2-tion-tin").unwrap();
    let cfg = SnnConfig {
        outputs: 10,
        ..SnnConfig::default()
    };
    let mut net = SnnNetwork::new(16, p, cfg, 4).unwrap();
    let mut counts = Default::default();
    net.present(&[0.8; 16], true, 4, &[0], &mut counts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snn.cimf");
    persist::save_snn(&net, &path, &BTreeMap::new()).unwrap();
    let c = Container::from_bytes(&std::fs::read(&path).unwrap(), "snn.cimf").unwrap();
    assert!(persist::is_snn(&c));
    let (back, _) = persist::load_snn(&path).unwrap();
    assert_eq!(back.weights(), net.weights());
    let theta = |n: &SnnNetwork| n.neurons().iter().map(|x| x.theta).collect::<Vec<_>>();
    assert_eq!(theta(&back), theta(&net));
    assert!(persist::load(&path).is_err());
}
