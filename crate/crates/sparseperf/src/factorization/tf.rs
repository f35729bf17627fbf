//! Rank-constrained tensor factorization: a learner matrix times a
//! shared knowledge tensor, fit by safeguarded gradient descent.

use std::io::Write;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{descend, Factors, GdConfig};
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, PerfTensor};

/// T̂[u,i,m] = Σ_k S[u,k] · K[k,i,m].
#[derive(Debug, Clone)]
pub struct TfModel {
    /// Learner factors, U × d.
    pub learner_factors: Array2<f64>,
    /// Knowledge tensor, d × N × M.
    pub knowledge_tensor: Array3<f64>,
    pub rank: usize,
    pub mono_weight: f64,
    pub training_curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
struct TfFactors {
    s: Array2<f64>,
    k: Array3<f64>,
}

impl Factors for TfFactors {
    fn reconstruct(&self) -> Array3<f64> {
        let (u, d) = self.s.dim();
        let (_, n, m) = self.k.dim();
        let mut out = Array3::zeros((u, n, m));
        for uu in 0..u {
            for kk in 0..d {
                let w = self.s[(uu, kk)];
                if w == 0.0 {
                    continue;
                }
                for i in 0..n {
                    for mm in 0..m {
                        out[(uu, i, mm)] += w * self.k[(kk, i, mm)];
                    }
                }
            }
        }
        out
    }

    fn pullback(&self, out_grad: &Array3<f64>) -> TfFactors {
        let (u, d) = self.s.dim();
        let (_, n, m) = self.k.dim();
        let mut gs = Array2::zeros((u, d));
        let mut gk = Array3::zeros((d, n, m));
        for uu in 0..u {
            for kk in 0..d {
                let mut acc = 0.0;
                for i in 0..n {
                    for mm in 0..m {
                        let g = out_grad[(uu, i, mm)];
                        acc += g * self.k[(kk, i, mm)];
                        gk[(kk, i, mm)] += g * self.s[(uu, kk)];
                    }
                }
                gs[(uu, kk)] = acc;
            }
        }
        TfFactors { s: gs, k: gk }
    }

    fn step(&self, grad: &TfFactors, lr: f64) -> TfFactors {
        TfFactors {
            s: &self.s - &(lr * &grad.s),
            k: &self.k - &(lr * &grad.k),
        }
    }
}

fn init_factors(dims: (usize, usize, usize), rank: usize, seed: u64) -> TfFactors {
    let (u, n, m) = dims;
    let scale = 1.0 / (rank as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    let s = Array2::from_shape_fn((u, rank), |_| normal() * scale);
    let k = Array3::from_shape_fn((rank, n, m), |_| normal() * scale);
    TfFactors { s, k }
}

/// Fit by gradient descent on observed cells plus the monotonicity
/// penalty. Deterministic per seed.
pub fn tf_fit(t: &PerfTensor, cfg: &GdConfig) -> Result<TfModel> {
    cfg.validate()?;
    let init = init_factors(t.dims(), cfg.rank, cfg.seed);
    let fit = descend(init, t, cfg)?;
    Ok(TfModel {
        learner_factors: fit.factors.s,
        knowledge_tensor: fit.factors.k,
        rank: cfg.rank,
        mono_weight: cfg.mono_weight,
        training_curve: fit.curve,
    })
}

impl TfModel {
    /// Raw reconstruction, before clamping.
    pub fn reconstruct(&self) -> Array3<f64> {
        TfFactors {
            s: self.learner_factors.clone(),
            k: self.knowledge_tensor.clone(),
        }
        .reconstruct()
    }

    /// Full dense prediction clamped to [0, 1]. Observed cells carry the
    /// smoothed reconstruction, not the raw data.
    pub fn predict(&self, t: &PerfTensor) -> Result<DenseTensor> {
        let (u, d) = self.learner_factors.dim();
        let (_, n, m) = self.knowledge_tensor.dim();
        if (u, n, m) != t.dims() || d != self.rank {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", t.dims()),
                found: format!("({u}, {n}, {m})"),
            });
        }
        DenseTensor::new(self.reconstruct().mapv(|v| v.clamp(0.0, 1.0))).clamp01()
    }

    /// Factor export: each matrix with a `name rows cols` header.
    pub fn write_factors<W: Write>(&self, w: &mut W) -> Result<()> {
        let (u, d) = self.learner_factors.dim();
        writeln!(w, "learner_factors {u} {d}")?;
        for row in self.learner_factors.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        let (dk, n, m) = self.knowledge_tensor.dim();
        writeln!(w, "knowledge_tensor {dk} {} # rows are n*m flattened", n * m)?;
        for kk in 0..dk {
            let line: Vec<String> = self
                .knowledge_tensor
                .index_axis(ndarray::Axis(0), kk)
                .iter()
                .map(|v| v.to_string())
                .collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}
