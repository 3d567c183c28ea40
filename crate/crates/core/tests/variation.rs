use cimsim::rng::{self, Domain};
use cimsim::variation::{apply_c2c, sample_d2d, VariationSpec};

#[test]
fn d2d_map_statistics() {
    let m = sample_d2d((100, 100), &VariationSpec::normal(0.1), 42).unwrap();
    let x = m.offsets();
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 0.005, "mean {mean}");
    assert!((sd - 0.1).abs() < 0.005, "sd {sd}");
    assert_eq!(m, sample_d2d((100, 100), &VariationSpec::normal(0.1), 42).unwrap());
    assert_ne!(m, sample_d2d((100, 100), &VariationSpec::normal(0.1), 43).unwrap());
    assert!(sample_d2d((3, 3), &VariationSpec::disabled(), 1).unwrap().is_zero());
}

#[test]
fn c2c_draws_are_fresh_and_centered() {
    let spec = VariationSpec::normal(0.05);
    let mut r = rng::stream(7, Domain::Misc, &[]);
    let draws: Vec<f64> = (0..10_000).map(|_| apply_c2c(0.5, &spec, &mut r)).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((mean - 0.5).abs() < 0.002, "mean {mean}");
    assert!(draws.windows(2).all(|w| w[0] != w[1]));
    assert_eq!(apply_c2c(0.5, &VariationSpec::disabled(), &mut r), 0.5);
}
