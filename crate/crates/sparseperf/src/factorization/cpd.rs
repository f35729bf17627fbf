//! Canonical polyadic decomposition with the shared monotonicity
//! penalty: T̂[u,i,m] = Σ_k λ_k · A[u,k] · B[i,k] · C[m,k] with unit
//! component weights.

use std::io::Write;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{descend, Factors, GdConfig};
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, PerfTensor};

#[derive(Debug, Clone)]
pub struct CpdModel {
    /// Learner factors, U × d.
    pub a: Array2<f64>,
    /// Question factors, N × d.
    pub b: Array2<f64>,
    /// Attempt factors, M × d.
    pub c: Array2<f64>,
    /// Component weights, fixed at 1.0.
    pub weights: Array1<f64>,
    pub rank: usize,
    pub mono_weight: f64,
    pub training_curve: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
struct CpdFactors {
    a: Array2<f64>,
    b: Array2<f64>,
    c: Array2<f64>,
}

impl Factors for CpdFactors {
    fn reconstruct(&self) -> Array3<f64> {
        let (u, d) = self.a.dim();
        let n = self.b.nrows();
        let m = self.c.nrows();
        let mut out = Array3::zeros((u, n, m));
        for uu in 0..u {
            for i in 0..n {
                for mm in 0..m {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += self.a[(uu, k)] * self.b[(i, k)] * self.c[(mm, k)];
                    }
                    out[(uu, i, mm)] = acc;
                }
            }
        }
        out
    }

    fn pullback(&self, out_grad: &Array3<f64>) -> CpdFactors {
        let (u, d) = self.a.dim();
        let n = self.b.nrows();
        let m = self.c.nrows();
        let mut ga = Array2::zeros((u, d));
        let mut gb = Array2::zeros((n, d));
        let mut gc = Array2::zeros((m, d));
        for uu in 0..u {
            for i in 0..n {
                for mm in 0..m {
                    let g = out_grad[(uu, i, mm)];
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        ga[(uu, k)] += g * self.b[(i, k)] * self.c[(mm, k)];
                        gb[(i, k)] += g * self.a[(uu, k)] * self.c[(mm, k)];
                        gc[(mm, k)] += g * self.a[(uu, k)] * self.b[(i, k)];
                    }
                }
            }
        }
        CpdFactors {
            a: ga,
            b: gb,
            c: gc,
        }
    }

    fn step(&self, grad: &CpdFactors, lr: f64) -> CpdFactors {
        CpdFactors {
            a: &self.a - &(lr * &grad.a),
            b: &self.b - &(lr * &grad.b),
            c: &self.c - &(lr * &grad.c),
        }
    }
}

/// Seeded normal init scaled 1/√d, drawn in the order A, B, C
/// (row-major within each matrix).
fn init_factors(dims: (usize, usize, usize), rank: usize, seed: u64) -> CpdFactors {
    let (u, n, m) = dims;
    let scale = 1.0 / (rank as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
    let a = Array2::from_shape_fn((u, rank), |_| normal() * scale);
    let b = Array2::from_shape_fn((n, rank), |_| normal() * scale);
    let c = Array2::from_shape_fn((m, rank), |_| normal() * scale);
    CpdFactors { a, b, c }
}

pub fn cpd_fit(t: &PerfTensor, cfg: &GdConfig) -> Result<CpdModel> {
    cfg.validate()?;
    let init = init_factors(t.dims(), cfg.rank, cfg.seed);
    let fit = descend(init, t, cfg)?;
    Ok(CpdModel {
        a: fit.factors.a,
        b: fit.factors.b,
        c: fit.factors.c,
        weights: Array1::ones(cfg.rank),
        rank: cfg.rank,
        mono_weight: cfg.mono_weight,
        training_curve: fit.curve,
    })
}

impl CpdModel {
    pub fn reconstruct(&self) -> Array3<f64> {
        CpdFactors {
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
        }
        .reconstruct()
    }

    pub fn predict(&self, t: &PerfTensor) -> Result<DenseTensor> {
        let dims = (self.a.nrows(), self.b.nrows(), self.c.nrows());
        if dims != t.dims() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", t.dims()),
                found: format!("{dims:?}"),
            });
        }
        DenseTensor::new(self.reconstruct().mapv(|v| v.clamp(0.0, 1.0))).clamp01()
    }

    pub fn write_factors<W: Write>(&self, w: &mut W) -> Result<()> {
        for (name, mat) in [("a", &self.a), ("b", &self.b), ("c", &self.c)] {
            let (r, c) = mat.dim();
            writeln!(w, "{name} {r} {c}")?;
            for row in mat.rows() {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        Ok(())
    }
}
