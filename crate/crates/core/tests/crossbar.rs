use cimsim::crossbar::{
    quantize_weight, AccumulateThreshold, CrossbarConfig, InputEncoding, NoiseModel, Quantizer, Scheme, SynapseArray,
};
use cimsim::device::{self, DeviceParams};
use cimsim::rng::{self, Domain};
use cimsim::variation::VariationSpec;
use ndarray::Array2;
use rand::Rng;

fn device_with(theta: f64, bits: u32) -> DeviceParams {
    DeviceParams::new(1.04e-6, 5.60e-8, 1.0, theta, theta, device::default_p_max(bits)).unwrap()
}

fn config(bits: u32, scheme: Scheme) -> CrossbarConfig {
    CrossbarConfig {
        bit_precision: bits,
        scheme,
        ..CrossbarConfig::default()
    }
}

fn random_matrix(rows: usize, cols: usize, lim: f64, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, Domain::Misc, &[]);
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-lim..=lim))
}

#[test]
fn quantizer_level_counts() {
    for bits in 2..=8 {
        let q = Quantizer::new(bits, Scheme::TwoDevice, 1.0);
        let levels = q.levels();
        assert_eq!(levels.len(), (1 << (bits + 1)) - 1, "{bits} bits");
        assert!(levels.contains(&0.0));
        for &l in &levels {
            assert_eq!(q.quantize(l), l);
        }
        assert_eq!(q.quantize(0.0), 0.0);
    }
    let binary = Quantizer::new(1, Scheme::TwoDevice, 1.0);
    assert_eq!(binary.levels(), vec![-1.0, 1.0]);
    assert_eq!(quantize_weight(-0.03, 1, Scheme::TwoDevice, 1.0), -1.0);
    assert_eq!(quantize_weight(0.0, 1, Scheme::TwoDevice, 1.0), 1.0);
}

#[test]
fn two_bit_grid_picks_nearest_level() {
    let q = Quantizer::new(2, Scheme::TwoDevice, 1.0);
    assert!((q.quantize(0.3) - 1.0 / 3.0).abs() < 1e-15);
    let mut r = rng::stream(3, Domain::Misc, &[]);
    let levels = q.levels();
    for _ in 0..1000 {
        let w: f64 = r.random_range(-1.2..1.2);
        let nearest = levels
            .iter()
            .copied()
            .min_by(|a, b| (a - w).abs().total_cmp(&(b - w).abs()))
            .unwrap();
        assert!((q.quantize(w) - nearest).abs() < 1e-12, "w {w}");
    }
}

fn write_random_quantized(theta: f64, bits: u32) -> (SynapseArray, Array2<f64>, Array2<f64>) {
    let cfg = config(bits, Scheme::TwoDevice);
    let mut a = SynapseArray::new(16, 16, device_with(theta, bits), &cfg, NoiseModel::ideal(), 1, 0).unwrap();
    let q = a.quantizer();
    let target = random_matrix(16, 16, 1.0, bits as u64).mapv(|w| q.quantize(w));
    a.write_weights(target.view(), None).unwrap();
    let read = a.read_weights();
    (a, target, read)
}

#[test]
fn write_then_read_is_within_half_step() {
    // pulse resolution finer than the weight grid
    for (theta, bits) in [(100.0, 4), (100.0, 7), (9.2339, 4), (1.0, 2), (0.2476, 1)] {
        let (a, target, read) = write_random_quantized(theta, bits);
        let half = if bits == 1 { 1e-12 } else { 0.5 * a.quantizer().step() };
        for (t, r) in target.iter().zip(read.iter()) {
            assert!((t - r).abs() <= half + 1e-12, "theta {theta} b {bits}: target {t} read {r}");
        }
    }
}

#[test]
fn write_error_is_bounded_by_one_pulse() {
    for (theta, bits) in [(0.2476, 4), (0.2476, 7), (0.4385, 5), (0.01, 3)] {
        let (a, target, read) = write_random_quantized(theta, bits);
        let p = *a.device();
        let gain = p.w_max / p.weight_range();
        let largest = (0..p.p_max)
            .map(|n| device::ltp_weight(n + 1, &p).unwrap() - device::ltp_weight(n, &p).unwrap())
            .fold(0.0, f64::max);
        for (t, r) in target.iter().zip(read.iter()) {
            assert!((t - r).abs() <= gain * largest + 1e-12, "theta {theta} b {bits}: target {t} read {r}");
        }
    }
}

#[test]
fn unchanged_cells_are_not_rewritten() {
    let cfg = config(4, Scheme::TwoDevice);
    let mut a = SynapseArray::new(4, 4, device_with(0.2476, 4), &cfg, NoiseModel::ideal(), 1, 0).unwrap();
    let t = random_matrix(4, 4, 1.0, 5);
    a.write_weights(t.view(), None).unwrap();
    let (gp, gn) = (a.g_pos().to_vec(), a.g_neg().unwrap().to_vec());
    let same = a.stored_weights();
    let stats = a.write_weights(same.view(), None).unwrap();
    assert_eq!(stats.cells_written, 0);
    assert_eq!((a.g_pos(), a.g_neg().unwrap()), (&gp[..], &gn[..]));
}

#[test]
fn full_scale_target_programs_endpoints() {
    let cfg = config(4, Scheme::TwoDevice);
    let p = device_with(0.2476, 4);
    let mut a = SynapseArray::new(1, 2, p, &cfg, NoiseModel::ideal(), 1, 0).unwrap();
    a.write_weights(Array2::from_shape_vec((1, 2), vec![1.0, -1.0]).unwrap().view(), None).unwrap();
    assert_eq!(a.g_pos(), &[p.g_max, p.g_min]);
    assert_eq!(a.g_neg().unwrap(), &[p.g_min, p.g_max]);
}

#[test]
fn read_noise_stays_within_four_sigma() {
    let cfg = config(4, Scheme::TwoDevice);
    let noise = NoiseModel {
        c2c: VariationSpec::normal(0.05),
        c2c_on_read: true,
        c2c_on_write: false,
        d2d: VariationSpec::disabled(),
    };
    let mut a = SynapseArray::new(10, 10, device_with(0.2476, 4), &cfg, noise, 1, 0).unwrap();
    a.write_weights(random_matrix(10, 10, 1.0, 2).view(), None).unwrap();
    let stored = a.stored_weights();
    // each read is the difference of two independently perturbed devices,
    // scaled by the read gain
    let k = 1.0 / a.device().weight_range();
    let sigma = k * 0.05 * 2f64.sqrt();
    let (mut inside, mut total) = (0usize, 0usize);
    let first = a.read_weights();
    let second = a.read_weights();
    assert_ne!(first, second);
    for _ in 0..100 {
        let r = a.read_weights();
        for (s, v) in stored.iter().zip(r.iter()) {
            total += 1;
            inside += ((v - s).abs() <= 4.0 * sigma) as usize;
        }
    }
    assert!(total == 10_000 && inside as f64 / total as f64 >= 0.999, "{inside}/{total}");
}

/// Dense matrix product by three nested loops.
fn brute_force(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let mut y = Array2::zeros((x.nrows(), w.ncols()));
    for b in 0..x.nrows() {
        for c in 0..w.ncols() {
            let mut s = 0.0;
            for r in 0..w.nrows() {
                s += x[[b, r]] * w[[r, c]];
            }
            y[[b, c]] = s;
        }
    }
    y
}

#[test]
fn ideal_mac_equals_matrix_product() {
    let mut r = rng::stream(11, Domain::Misc, &[]);
    for instance in 0..100u64 {
        let cfg = CrossbarConfig {
            tile_rows: 1 + (instance as usize % 40),
            ..config(32, Scheme::TwoDevice)
        };
        let mut a = SynapseArray::new(32, 16, device_with(100.0, 32), &cfg, NoiseModel::ideal(), instance, 0).unwrap();
        a.write_weights(random_matrix(32, 16, 1.0, 100 + instance).view(), None).unwrap();
        let w = a.stored_weights();
        let x = Array2::from_shape_simple_fn((3, 32), || r.random_range(0.0..=1.0));
        let got = a.mac_batch(x.view()).unwrap().y;
        let want = brute_force(&x, &w);
        for (g, e) in got.iter().zip(want.iter()) {
            assert!((g - e).abs() <= 1e-6 * e.abs().max(1.0), "instance {instance}: {g} vs {e}");
        }
        let single = a.mac(x.row(0).as_slice().unwrap()).unwrap();
        assert_eq!(single.len(), 16);
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let cfg = config(4, Scheme::TwoDevice);
    let mut a = SynapseArray::new(8, 3, device_with(0.2476, 4), &cfg, NoiseModel::ideal(), 1, 0).unwrap();
    a.write_weights(random_matrix(8, 3, 1.0, 9).view(), None).unwrap();
    assert_eq!(a.mac(&[0.0; 8]).unwrap(), vec![0.0; 3]);
}

#[test]
fn bit_serial_matches_amplitude_within_input_resolution() {
    let amp = config(32, Scheme::TwoDevice);
    let serial = CrossbarConfig {
        input_encoding: InputEncoding::BitSerial,
        input_bits: 8,
        ..amp.clone()
    };
    let p = device_with(100.0, 32);
    let w = random_matrix(32, 16, 1.0, 4);
    let mut a = SynapseArray::new(32, 16, p, &amp, NoiseModel::ideal(), 1, 0).unwrap();
    let mut b = SynapseArray::new(32, 16, p, &serial, NoiseModel::ideal(), 1, 0).unwrap();
    a.write_weights(w.view(), None).unwrap();
    b.write_weights(w.view(), None).unwrap();
    let mut r = rng::stream(8, Domain::Misc, &[]);
    let x = Array2::from_shape_simple_fn((5, 32), || r.random_range(0.0..=1.0));
    let ya = a.mac_batch(x.view()).unwrap().y;
    let yb = b.mac_batch(x.view()).unwrap().y;
    // full scale of a column: every input at 1, every weight at w_max
    let full_scale = 32.0;
    for (u, v) in ya.iter().zip(yb.iter()) {
        assert!((u - v).abs() <= full_scale / 256.0, "{u} vs {v}");
    }
}

#[test]
fn accumulated_update_thresholds() {
    let cfg = config(7, Scheme::TwoDevice);
    let mut a = SynapseArray::new(4, 4, device_with(0.2476, 7), &cfg, NoiseModel::ideal(), 1, 0).unwrap();
    let mut buf = Array2::zeros((4, 4));
    let tiny = Array2::from_elem((4, 4), 1e-4);
    let s = a.accumulated_update(tiny.view(), &mut buf, AccumulateThreshold::Fixed(0.1)).unwrap();
    assert_eq!(s.cells_written, 0);
    let mut big = Array2::zeros((4, 4));
    big[[2, 1]] = 0.5;
    let s = a.accumulated_update(big.view(), &mut buf, AccumulateThreshold::MeanAbsDelta).unwrap();
    assert_eq!(s.cells_written, 1);
}

#[test]
fn linear_update_saturates_and_ignores_zero() {
    let cfg = config(7, Scheme::TwoDevice);
    let p = device_with(100.0, 7);
    let mut a = SynapseArray::new(2, 2, p, &cfg, NoiseModel::ideal(), 1, 0).unwrap();
    let before = a.g_pos().to_vec();
    assert_eq!(a.linear_update(Array2::zeros((2, 2)).view()).unwrap().cells_written, 0);
    assert_eq!(a.g_pos(), &before[..]);
    let push = Array2::from_elem((2, 2), -0.3);
    for _ in 0..20 {
        a.linear_update(push.view()).unwrap();
    }
    assert!(a.g_pos().iter().all(|&g| g == p.g_max));
    assert!(a.stored_weights().iter().all(|&w| (w - 1.0).abs() < 1e-12));
}

#[test]
fn one_device_reference_reads_zero() {
    let cfg = config(4, Scheme::OneDevice);
    let p = device_with(0.2476, 4);
    let mut a = SynapseArray::new(3, 3, p, &cfg, NoiseModel::ideal(), 1, 0).unwrap();
    let g_ref = a.g_ref();
    a.restore(vec![g_ref; 9], None).unwrap();
    assert!(a.read_weights().iter().all(|w| w.abs() < 1e-12));
}
