//! Gradient-descent optimizers. `step` turns a gradient into the delta to
//! subtract from the parameter.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
    Rmsprop {
        #[serde(default = "rho")]
        rho: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn rho() -> f64 {
    0.9
}
fn eps() -> f64 {
    1e-8
}

impl OptimizerSpec {
    pub fn adam() -> Self {
        OptimizerSpec::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
        }
    }

    pub fn rmsprop() -> Self {
        OptimizerSpec::Rmsprop { rho: rho(), eps: eps() }
    }

    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        let unit = |name: &str, x: f64, v: &mut Vec<String>| {
            if !(x > 0.0 && x < 1.0) {
                v.push(format!("{prefix}.{name}: {x} outside (0, 1)"));
            }
        };
        match *self {
            OptimizerSpec::Sgd => {}
            OptimizerSpec::Adam { beta1, beta2, eps } => {
                unit("beta1", beta1, &mut v);
                unit("beta2", beta2, &mut v);
                if !(eps > 0.0) {
                    v.push(format!("{prefix}.eps: {eps} must be > 0"));
                }
            }
            OptimizerSpec::Rmsprop { rho, eps } => {
                unit("rho", rho, &mut v);
                if !(eps > 0.0) {
                    v.push(format!("{prefix}.eps: {eps} must be > 0"));
                }
            }
        }
        v
    }
}

/// Per-parameter moment estimates. `m` is unused by RMSprop, both are unused
/// by SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub t: u64,
}

impl OptState {
    pub fn new(shape: (usize, usize)) -> Self {
        OptState {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }
}

/// Returns the delta `Δ` such that the update is `w ← w − Δ`.
pub fn step(spec: &OptimizerSpec, grad: &Array2<f64>, state: &mut OptState, lr: f64) -> Array2<f64> {
    state.t += 1;
    match *spec {
        OptimizerSpec::Sgd => grad * lr,
        OptimizerSpec::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(state.t.min(i32::MAX as u64) as i32);
            let c2 = 1.0 - beta2.powi(state.t.min(i32::MAX as u64) as i32);
            let mut out = Array2::zeros(grad.dim());
            Zip::from(&mut out)
                .and(&mut state.m)
                .and(&mut state.v)
                .and(grad)
                .for_each(|o, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *o = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            out
        }
        OptimizerSpec::Rmsprop { rho, eps } => {
            let mut out = Array2::zeros(grad.dim());
            Zip::from(&mut out).and(&mut state.v).and(grad).for_each(|o, v, &g| {
                *v = rho * *v + (1.0 - rho) * g * g;
                *o = lr * g / (v.sqrt() + eps);
            });
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr() {
        let g = Array2::from_elem((1, 1), 0.37);
        let mut s = OptState::new((1, 1));
        let d = step(&OptimizerSpec::adam(), &g, &mut s, 0.01);
        assert!((d[[0, 0]] - 0.01 * 0.37 / (0.37 + 1e-8)).abs() < 1e-15);
    }
}
