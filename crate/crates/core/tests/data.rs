use std::path::{Path, PathBuf};

use cimsim::data::{self, load_cifar10, load_mnist, parse_cifar_batch, parse_idx_images, parse_idx_labels, Split};
use cimsim::Error;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn real_mnist() -> Option<PathBuf> {
    let dir = std::env::var_os("CIMSIM_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.is_dir().then_some(dir)
}

#[test]
fn mnist_fixture_pixels_are_exact() {
    let (train, test) = load_mnist(&fixtures().join("mnist")).unwrap();
    assert_eq!((train.len(), test.len()), (2, 2));
    assert_eq!(train.shape, (1, 2, 3));
    assert_eq!(train.split, Split::Train);
    assert_eq!(train.labels, vec![7, 2]);
    assert_eq!(test.labels, vec![1, 0]);
    assert_eq!(train.images.row(0).to_vec(), vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    assert_eq!(train.images[[1, 1]], 0.2);
    assert_eq!(train.images[[1, 5]], 1.0);
    for (i, &px) in train.images.iter().enumerate() {
        assert!((0.0..=1.0).contains(&px));
        let want = [[0u8, 0, 0, 0, 0, 255], [0, 0x33, 0x66, 0x99, 0xcc, 0xff]][i / 6][i % 6];
        assert_eq!((px * 255.0).round() as u8, want);
    }
}

#[test]
fn flipped_magic_names_offset_zero() {
    let path = fixtures().join("mnist/train-images-idx3-ubyte");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[3] = 0x01;
    match parse_idx_images(&bytes, &path) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("expected parse error, got {other:?}"),
    }
    let lpath = fixtures().join("mnist/train-labels-idx1-ubyte");
    let mut lbytes = std::fs::read(&lpath).unwrap();
    lbytes[3] = 0x03;
    assert!(matches!(parse_idx_labels(&lbytes, &lpath), Err(Error::Parse { offset: 0, .. })));
}

#[test]
fn truncated_idx_is_rejected() {
    let path = fixtures().join("mnist/train-images-idx3-ubyte");
    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(parse_idx_images(&bytes[..bytes.len() - 1], &path), Err(Error::Parse { .. })));
    assert!(matches!(parse_idx_images(&bytes[..10], &path), Err(Error::Parse { .. })));
}

#[test]
fn cifar_fixture_label_and_corners() {
    let (train, test) = load_cifar10(&fixtures().join("cifar")).unwrap();
    assert_eq!((train.len(), test.len()), (5, 1));
    assert_eq!(train.shape, (3, 32, 32));
    assert_eq!(train.labels, vec![3; 5]);
    assert_eq!(test.labels, vec![8]);
    let row = test.images.row(0);
    assert_eq!(row[0], 1.0);
    assert_eq!(row[3071], 0.0);
    // first green pixel: (1 * 1024 + 0) % 256 = 0; second red pixel: 1
    assert_eq!(row[1024], 0.0);
    assert_eq!((row[1] * 255.0).round(), 1.0);
}

#[test]
fn cifar_bad_sizes_are_rejected() {
    let p = Path::new("empty.bin");
    assert!(matches!(parse_cifar_batch(&[], p), Err(Error::Parse { .. })));
    assert!(matches!(parse_cifar_batch(&[0u8; 3074], p), Err(Error::Parse { offset: 3073, .. })));
}

#[test]
fn batches_cover_every_sample_once() {
    for (len, bs) in [(0usize, 3usize), (10, 3), (100, 100), (101, 10)] {
        let b = data::batches(len, bs, 9, 2).unwrap();
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..len).collect::<Vec<_>>());
        assert!(b.iter().all(|x| x.len() <= bs));
    }
    assert_ne!(data::batches(50, 10, 9, 0).unwrap(), data::batches(50, 10, 9, 1).unwrap());
}

#[test]
fn mnist_split_sizes_and_stratified_subset() {
    let Some(dir) = real_mnist() else {
        eprintln!("MNIST not found; skipping");
        return;
    };
    let (train, test) = load_mnist(&dir).unwrap();
    assert_eq!((train.len(), test.len()), (60_000, 10_000));
    let s = data::subset(&train, 10_000, 4).unwrap();
    assert_eq!(s.len(), 10_000);
    for (c, n) in s.class_counts().into_iter().enumerate() {
        assert!((950..=1050).contains(&n), "class {c}: {n}");
    }
    let again = data::subset(&train, 10_000, 4).unwrap();
    assert_eq!(s.labels, again.labels);
    assert_eq!(s.images, again.images);
    let all = data::subset(&test, test.len(), 1).unwrap();
    assert_eq!(all.class_counts(), test.class_counts());
    assert!(data::subset(&test, test.len() + 1, 1).is_err());
}
