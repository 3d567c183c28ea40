//! Cycle-to-cycle (C2C) and device-to-device (D2D) weight perturbations.
//!
//! Both kinds are additive in normalized weight space. D2D offsets are drawn
//! once per simulated chip and then frozen; C2C offsets are redrawn on every
//! read and every write cycle.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Normal,
    Lognormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationSpec {
    pub distribution: Distribution,
    pub mu: f64,
    pub sigma: f64,
}

impl Default for VariationSpec {
    fn default() -> Self {
        VariationSpec::disabled()
    }
}

impl VariationSpec {
    pub const fn disabled() -> Self {
        VariationSpec {
            distribution: Distribution::Normal,
            mu: 0.0,
            sigma: 0.0,
        }
    }

    pub const fn normal(sigma: f64) -> Self {
        VariationSpec {
            distribution: Distribution::Normal,
            mu: 0.0,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::domain(format!("sigma {} must be finite and >= 0", self.sigma)));
        }
        if !self.mu.is_finite() {
            return Err(Error::domain(format!("mu {} must be finite", self.mu)));
        }
        Ok(())
    }

    pub fn is_enabled(&self) -> bool {
        self.sigma > 0.0
    }

    /// One centered perturbation. Log-normal draws have their median `e^mu`
    /// subtracted so the perturbation does not bias weights upward.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if !self.is_enabled() {
            return 0.0;
        }
        let z: f64 = rng.sample(StandardNormal);
        match self.distribution {
            Distribution::Normal => self.mu + self.sigma * z,
            Distribution::Lognormal => (self.mu + self.sigma * z).exp() - self.mu.exp(),
        }
    }
}

/// Returns `w` plus a fresh C2C perturbation.
pub fn apply_c2c<R: Rng + ?Sized>(w: f64, spec: &VariationSpec, rng: &mut R) -> f64 {
    w + spec.sample(rng)
}

/// Frozen per-device offsets for one device matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct D2DMap {
    rows: usize,
    cols: usize,
    offsets: Vec<f64>,
    seed: u64,
}

impl D2DMap {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        D2DMap {
            rows,
            cols,
            offsets: vec![0.0; rows * cols],
            seed: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major offsets.
    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.offsets[r * self.cols + c]
    }

    pub fn is_zero(&self) -> bool {
        self.offsets.iter().all(|&x| x == 0.0)
    }
}

/// Draws a D2D map. Deterministic in `seed`; each row uses its own substream.
pub fn sample_d2d(shape: (usize, usize), spec: &VariationSpec, seed: u64) -> Result<D2DMap> {
    let (rows, cols) = shape;
    if rows == 0 || cols == 0 {
        return Err(Error::domain(format!("D2D map shape {rows}x{cols} must be non-empty")));
    }
    spec.validate()?;
    let mut offsets = vec![0.0; rows * cols];
    fill_field(&mut offsets, cols, spec, seed, Domain::D2d, &[]);
    Ok(D2DMap {
        rows,
        cols,
        offsets,
        seed,
    })
}

/// Fills a row-major `rows x cols` buffer with i.i.d. perturbations. Row `r`
/// draws from the stream `(seed, domain, coords.., r)`.
pub(crate) fn fill_field(
    buf: &mut [f64],
    cols: usize,
    spec: &VariationSpec,
    seed: u64,
    domain: Domain,
    coords: &[u64],
) {
    if !spec.is_enabled() {
        buf.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    par::for_each_chunk_mut(buf, cols, |r, row| {
        let mut c = coords.to_vec();
        c.push(r as u64);
        let mut rng = rng::stream(seed, domain, &c);
        for x in row.iter_mut() {
            *x = spec.sample(&mut rng);
        }
    });
}
