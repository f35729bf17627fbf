//! Tensor-completion baselines: gradient-descent factorization with a
//! rank constraint expressed as a monotonicity penalty, canonical
//! polyadic decomposition, and a Bayesian variant fit by Gibbs sampling.
//!
//! The two gradient methods share one descent driver with a
//! step-halving safeguard: whenever a step would increase the loss, the
//! learning rate is halved and the step retried, so the recorded loss
//! sequence is non-increasing.

pub mod linalg;

mod bptf;
mod cpd;
mod tf;

pub use bptf::{bptf_fit, BptfConfig, BptfModel};
pub use cpd::{cpd_fit, CpdModel};
pub use tf::{tf_fit, TfModel};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::PerfTensor;

/// Settings shared by the two gradient-descent fits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GdConfig {
    pub rank: usize,
    /// Weight λ of the squared hinge on adjacent-attempt decreases.
    pub mono_weight: f64,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            rank: 3,
            mono_weight: 0.1,
            learning_rate: 0.1,
            max_iterations: 100,
            seed: 0,
        }
    }
}

impl GdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be >= 1".into()));
        }
        if self.mono_weight < 0.0 {
            return Err(Error::InvalidConfig("mono_weight must be >= 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// λ · Σ max(0, T̂[u,i,m] − T̂[u,i,m+1])², zero iff non-decreasing
/// along attempts.
pub fn mono_penalty(pred: &Array3<f64>, weight: f64) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    let (u, n, m) = pred.dim();
    let mut acc = 0.0;
    for uu in 0..u {
        for i in 0..n {
            for mm in 0..m.saturating_sub(1) {
                let d = pred[(uu, i, mm)] - pred[(uu, i, mm + 1)];
                if d > 0.0 {
                    acc += d * d;
                }
            }
        }
    }
    weight * acc
}

fn mono_grad_into(pred: &Array3<f64>, weight: f64, grad: &mut Array3<f64>) {
    if weight == 0.0 {
        return;
    }
    let (u, n, m) = pred.dim();
    for uu in 0..u {
        for i in 0..n {
            for mm in 0..m.saturating_sub(1) {
                let d = pred[(uu, i, mm)] - pred[(uu, i, mm + 1)];
                if d > 0.0 {
                    grad[(uu, i, mm)] += 2.0 * weight * d;
                    grad[(uu, i, mm + 1)] -= 2.0 * weight * d;
                }
            }
        }
    }
}

/// A factor parameterization usable by the shared descent driver.
trait Factors: Clone {
    fn reconstruct(&self) -> Array3<f64>;
    /// Pull the loss gradient with respect to the reconstruction back to
    /// the factors.
    fn pullback(&self, out_grad: &Array3<f64>) -> Self;
    /// self − lr · grad, component-wise.
    fn step(&self, grad: &Self, lr: f64) -> Self;
}

struct Descent<F> {
    factors: F,
    /// Per-iteration observed-cell RMSE.
    curve: Vec<(usize, f64)>,
}

/// Squared-error-plus-penalty loss and observed RMSE for one point.
fn loss_of(
    pred: &Array3<f64>,
    cells: &[((usize, usize, usize), f64)],
    weight: f64,
) -> (f64, f64) {
    let mut sse = 0.0;
    for &(idx, tau) in cells {
        let e = pred[idx] - tau;
        sse += e * e;
    }
    let loss = sse + mono_penalty(pred, weight);
    (loss, (sse / cells.len() as f64).sqrt())
}

fn descend<F: Factors>(init: F, t: &PerfTensor, cfg: &GdConfig) -> Result<Descent<F>> {
    let cells = t.observed_cells();
    if cells.is_empty() {
        return Err(Error::EmptyCells);
    }
    let mut factors = init;
    let mut pred = factors.reconstruct();
    let (mut loss, _) = loss_of(&pred, &cells, cfg.mono_weight);
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration: 0 });
    }
    let mut lr = cfg.learning_rate;
    let mut curve = Vec::with_capacity(cfg.max_iterations);
    'outer: for iter in 1..=cfg.max_iterations {
        let mut out_grad = Array3::zeros(pred.dim());
        for &(idx, tau) in &cells {
            out_grad[idx] += 2.0 * (pred[idx] - tau);
        }
        mono_grad_into(&pred, cfg.mono_weight, &mut out_grad);
        let grad = factors.pullback(&out_grad);
        loop {
            let trial = factors.step(&grad, lr);
            let trial_pred = trial.reconstruct();
            let (trial_loss, trial_rmse) = loss_of(&trial_pred, &cells, cfg.mono_weight);
            if trial_loss.is_finite() && trial_loss <= loss {
                factors = trial;
                pred = trial_pred;
                loss = trial_loss;
                curve.push((iter, trial_rmse));
                break;
            }
            lr /= 2.0;
            if lr < 1e-14 {
                // no descent direction left at numeric precision
                break 'outer;
            }
        }
    }
    if curve.is_empty() {
        return Err(Error::Divergence { iteration: 1 });
    }
    Ok(Descent { factors, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3 as A3;

    #[test]
    fn penalty_zero_iff_non_decreasing() {
        let inc = A3::from_shape_fn((2, 2, 4), |(_, _, m)| m as f64 * 0.1);
        assert_eq!(mono_penalty(&inc, 1.0), 0.0);
        let mut dec = inc.clone();
        dec[(0, 1, 2)] = 1.0; // creates a drop into attempt 3
        assert!(mono_penalty(&dec, 1.0) > 0.0);
    }

    #[test]
    fn penalty_matches_hand_value() {
        // single fiber 0.5, 0.2, 0.4: one drop of 0.3
        let p = A3::from_shape_vec((1, 1, 3), vec![0.5, 0.2, 0.4]).unwrap();
        assert!((mono_penalty(&p, 2.0) - 2.0 * 0.09).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let p = A3::from_shape_vec((1, 2, 3), vec![0.5, 0.2, 0.4, 0.9, 0.9, 0.1]).unwrap();
        let w = 1.7;
        let mut g = A3::zeros(p.dim());
        mono_grad_into(&p, w, &mut g);
        let h = 1e-6;
        for idx in [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 1, 1), (0, 1, 2)] {
            let mut plus = p.clone();
            plus[idx] += h;
            let mut minus = p.clone();
            minus[idx] -= h;
            let fd = (mono_penalty(&plus, w) - mono_penalty(&minus, w)) / (2.0 * h);
            assert!((g[idx] - fd).abs() < 1e-5, "idx {idx:?}");
        }
    }
}
