//! MNIST (IDX) and CIFAR-10 (binary batch) loaders, subsetting and batching.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images stored one per row, channel-major (`c, h, w`), pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array2<f64>,
    pub labels: Vec<u8>,
    /// `(channels, height, width)`
    pub shape: (usize, usize, usize),
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Array2<f64>,
        labels: Vec<u8>,
        shape: (usize, usize, usize),
        classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::domain(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if images.ncols() != shape.0 * shape.1 * shape.2 {
            return Err(Error::domain("image width does not match shape"));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::domain(format!("label {l} outside [0, {classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            shape,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            classes: self.classes,
            split: self.split,
        }
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

fn parse_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| parse_err(path, off as u64, "truncated header"))
}

/// Parses an IDX image file (magic `0x00000803`). Returns `(count, rows,
/// cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0803 {
        return Err(parse_err(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let h = be_u32(bytes, 8, path)? as usize;
    let w = be_u32(bytes, 12, path)? as usize;
    let need = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| parse_err(path, 4, "dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("truncated: expected {need} pixel bytes, found {}", body.len()),
        ));
    }
    if body.len() > need {
        return Err(parse_err(path, (16 + need) as u64, "trailing bytes after pixel data"));
    }
    Ok((n, h, w, body.iter().map(|&b| b as f64 / 255.0).collect()))
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != 0x0000_0801 {
        return Err(parse_err(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(parse_err(
            path,
            (8 + body.len().min(n)) as u64,
            format!("expected {n} labels, found {}", body.len()),
        ));
    }
    Ok(body.to_vec())
}

fn load_idx_pair(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let (n, h, w, px) = parse_idx_images(&read_file(images)?, images)?;
    let lb = parse_idx_labels(&read_file(labels)?, labels)?;
    if lb.len() != n {
        return Err(parse_err(
            labels,
            4,
            format!("label count {} does not match image count {n}", lb.len()),
        ));
    }
    if let Some(pos) = lb.iter().position(|&l| l >= 10) {
        return Err(parse_err(labels, 8 + pos as u64, format!("label {} outside 0..10", lb[pos])));
    }
    let images = Array2::from_shape_vec((n, h * w), px).expect("sized above");
    Dataset::new(images, lb, (1, h, w), 10, split)
}

fn find(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for s in stems {
        let p = dir.join(s);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stems[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    ))
}

/// Loads the four standard MNIST IDX files from `dir`. Both the dotted
/// (`train-images.idx3-ubyte`) and dashed (`train-images-idx3-ubyte`) names
/// are accepted.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let f = |kind: &str, n: u8| -> Result<PathBuf> {
        let a = format!("{kind}-idx{n}-ubyte");
        let b = format!("{kind}.idx{n}-ubyte");
        find(dir, &[&a, &b])
    };
    let train = load_idx_pair(&f("train-images", 3)?, &f("train-labels", 1)?, Split::Train)?;
    let test = load_idx_pair(&f("t10k-images", 3)?, &f("t10k-labels", 1)?, Split::Test)?;
    Ok((train, test))
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses one CIFAR-10 binary batch: records of one label byte followed by
/// 3072 pixel bytes (R, G and B planes, each 32x32 row-major).
pub fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<f64>)> {
    if bytes.is_empty() {
        return Err(parse_err(path, 0, "empty CIFAR batch"));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(parse_err(
            path,
            whole as u64,
            format!("size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut px = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(parse_err(
                path,
                (i * CIFAR_RECORD) as u64,
                format!("label {} outside 0..10", rec[0]),
            ));
        }
        labels.push(rec[0]);
        px.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((labels, px))
}

fn load_cifar_files(files: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut px = Vec::new();
    for f in files {
        let (l, p) = parse_cifar_batch(&read_file(f)?, f)?;
        labels.extend(l);
        px.extend(p);
    }
    let images = Array2::from_shape_vec((labels.len(), 3 * 32 * 32), px).expect("sized by parser");
    Dataset::new(images, labels, (3, 32, 32), 10, split)
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train: Result<Vec<_>> = (1..=5)
        .map(|i| find(dir, &[&format!("data_batch_{i}.bin")]))
        .collect();
    let test = find(dir, &["test_batch.bin"])?;
    Ok((load_cifar_files(&train?, Split::Train)?, load_cifar_files(&[test], Split::Test)?))
}

/// Class-stratified seeded subset of `n` samples. Classes contribute equal
/// shares; a class with too few samples gives all it has and the shortfall
/// is spread over the remaining classes, lowest class index first.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::domain(format!(
            "subset size {n} outside [1, {}]",
            ds.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut take = vec![0usize; ds.classes];
    let mut left = n;
    while left > 0 {
        let open: Vec<usize> = (0..ds.classes).filter(|&c| take[c] < by_class[c].len()).collect();
        let share = (left / open.len()).max(1);
        for &c in &open {
            let add = share.min(by_class[c].len() - take[c]).min(left);
            take[c] += add;
            left -= add;
            if left == 0 {
                break;
            }
        }
    }
    let mut idx = Vec::with_capacity(n);
    for (c, members) in by_class.iter_mut().enumerate() {
        let mut r = rng::stream(seed, Domain::Subset, &[c as u64]);
        members.shuffle(&mut r);
        idx.extend_from_slice(&members[..take[c]]);
    }
    idx.sort_unstable();
    Ok(ds.select(&idx))
}

/// Shuffled mini-batch index lists for one epoch. Every sample appears
/// exactly once; the last batch may be short.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::domain("batch_size must be >= 1"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::stream(seed, Domain::Shuffle, &[epoch]));
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flipped_magic_reports_offset_zero() {
        let mut b = vec![0u8, 0, 8, 4, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        b[3] = 0x04;
        match parse_idx_images(&b, Path::new("x")) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batches_cover_once() {
        let b = batches(103, 10, 4, 2).unwrap();
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(b.len(), 11);
    }
}
