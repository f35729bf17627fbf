//! Bayesian probabilistic tensor factorization fit by Gibbs sampling.
//!
//! Model: τ[u,i,m] ~ N(Σ_k U[u,k]·V[i,k]·W[m,k], α⁻¹) over observed
//! cells. Each factor matrix has a Gaussian row prior whose mean and
//! precision carry a Gaussian-Wishart hyperprior (mean 0, scale I,
//! d + 1 degrees of freedom, strength 1); the observation precision α
//! has a Gamma prior with shape 2 and rate 2 × observed variance.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::linalg::{chol_solve, cholesky, sample_mvn_precision, sample_wishart};
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, PerfTensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct BptfConfig {
    pub rank: usize,
    pub burn_in: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for BptfConfig {
    fn default() -> Self {
        BptfConfig {
            rank: 3,
            burn_in: 50,
            samples: 50,
            seed: 0,
        }
    }
}

impl BptfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be >= 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// One retained posterior draw.
#[derive(Debug, Clone)]
pub struct BptfSample {
    /// Learner factors, U × d.
    pub learner: Array2<f64>,
    /// Question factors, N × d.
    pub question: Array2<f64>,
    /// Attempt factors, M × d.
    pub attempt: Array2<f64>,
    /// Observation precision, > 0.
    pub precision: f64,
}

#[derive(Debug, Clone)]
pub struct BptfModel {
    pub samples: Vec<BptfSample>,
    pub config: BptfConfig,
    /// Times a conditional covariance needed an ε·I bump to factor.
    pub regularization_events: usize,
}

fn reconstruct_one(s: &BptfSample) -> Array3<f64> {
    let (u, d) = s.learner.dim();
    let n = s.question.nrows();
    let m = s.attempt.nrows();
    let mut out = Array3::zeros((u, n, m));
    for uu in 0..u {
        for i in 0..n {
            for mm in 0..m {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += s.learner[(uu, k)] * s.question[(i, k)] * s.attempt[(mm, k)];
                }
                out[(uu, i, mm)] = acc;
            }
        }
    }
    out
}

/// Cholesky with escalating ε·I regularization; counts bump events.
fn chol_regularized(a: &Array2<f64>, events: &mut usize) -> Result<Array2<f64>> {
    if let Some(l) = cholesky(a) {
        return Ok(l);
    }
    let d = a.nrows();
    let mut eps = 1e-8;
    for _ in 0..12 {
        let mut bumped = a.clone();
        for i in 0..d {
            bumped[(i, i)] += eps;
        }
        if let Some(l) = cholesky(&bumped) {
            *events += 1;
            return Ok(l);
        }
        eps *= 10.0;
    }
    Err(Error::NonFinite {
        context: "conditional covariance not positive definite".to_string(),
    })
}

/// Gaussian-Wishart conditional for one factor matrix's row prior.
fn sample_hyper(
    x: &Array2<f64>,
    rng: &mut ChaCha8Rng,
    events: &mut usize,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let (n, d) = x.dim();
    let nf = n as f64;
    let beta0 = 1.0;
    let nu0 = d as f64 + 1.0;
    let xbar = x.mean_axis(ndarray::Axis(0)).expect("n >= 1");
    let mut s_bar = Array2::zeros((d, d));
    for row in x.rows() {
        let c = &row.to_owned() - &xbar;
        for i in 0..d {
            for j in 0..d {
                s_bar[(i, j)] += c[i] * c[j];
            }
        }
    }
    s_bar /= nf;
    // W*⁻¹ = W0⁻¹ + n·S̄ + (β0 n / (β0 + n)) x̄ x̄ᵀ   (μ0 = 0, W0 = I)
    let mut winv = Array2::eye(d);
    let coef = beta0 * nf / (beta0 + nf);
    for i in 0..d {
        for j in 0..d {
            winv[(i, j)] += nf * s_bar[(i, j)] + coef * xbar[i] * xbar[j];
        }
    }
    // invert W*⁻¹ via Cholesky to get the Wishart scale
    let l = chol_regularized(&winv, events)?;
    let mut wstar = Array2::zeros((d, d));
    for j in 0..d {
        let mut e = Array1::zeros(d);
        e[j] = 1.0;
        let col = chol_solve(&l, &e);
        for i in 0..d {
            wstar[(i, j)] = col[i];
        }
    }
    // symmetrize against round-off before factoring
    let wstar = (&wstar + &wstar.t()) * 0.5;
    let scale_l = chol_regularized(&wstar, events)?;
    let lambda = sample_wishart(&scale_l, nu0 + nf, rng);
    let lambda = (&lambda + &lambda.t()) * 0.5;
    // μ | Λ ~ N(n x̄ / (β0 + n), ((β0 + n) Λ)⁻¹)
    let mu_star = xbar.mapv(|v| nf * v / (beta0 + nf));
    let prec = lambda.mapv(|v| v * (beta0 + nf));
    let prec_l = chol_regularized(&prec, events)?;
    let mu = sample_mvn_precision(&mu_star, &prec_l, rng);
    Ok((mu, lambda))
}

/// Observed-cell index lists grouped along one mode.
type ModeIndex = Vec<Vec<(usize, usize, f64)>>;

fn group_cells(
    cells: &[((usize, usize, usize), f64)],
    dims: (usize, usize, usize),
) -> (ModeIndex, ModeIndex, ModeIndex) {
    let (u, n, m) = dims;
    let mut by_u: ModeIndex = vec![Vec::new(); u];
    let mut by_i: ModeIndex = vec![Vec::new(); n];
    let mut by_m: ModeIndex = vec![Vec::new(); m];
    for &((uu, i, mm), tau) in cells {
        by_u[uu].push((i, mm, tau));
        by_i[i].push((uu, mm, tau));
        by_m[mm].push((uu, i, tau));
    }
    (by_u, by_i, by_m)
}

#[allow(clippy::too_many_arguments)]
fn sample_factor_rows(
    target: &mut Array2<f64>,
    other1: &Array2<f64>,
    other2: &Array2<f64>,
    grouped: &ModeIndex,
    mu: &Array1<f64>,
    lambda: &Array2<f64>,
    alpha: f64,
    rng: &mut ChaCha8Rng,
    events: &mut usize,
) -> Result<()> {
    let d = target.ncols();
    let prior_rhs = lambda.dot(mu);
    for (row, obs) in grouped.iter().enumerate() {
        let mut prec = lambda.clone();
        let mut rhs = prior_rhs.clone();
        for &(a, b, tau) in obs {
            let mut q = Array1::zeros(d);
            for k in 0..d {
                q[k] = other1[(a, k)] * other2[(b, k)];
            }
            for i in 0..d {
                for j in 0..d {
                    prec[(i, j)] += alpha * q[i] * q[j];
                }
                rhs[i] += alpha * tau * q[i];
            }
        }
        let l = chol_regularized(&prec, events)?;
        let mean = chol_solve(&l, &rhs);
        let draw = sample_mvn_precision(&mean, &l, rng);
        for k in 0..d {
            target[(row, k)] = draw[k];
        }
    }
    Ok(())
}

pub fn bptf_fit(t: &PerfTensor, cfg: &BptfConfig) -> Result<BptfModel> {
    cfg.validate()?;
    let cells = t.observed_cells();
    if cells.is_empty() {
        return Err(Error::EmptyCells);
    }
    let dims = t.dims();
    let (u, n, m) = dims;
    let d = cfg.rank;
    let (by_u, by_i, by_m) = group_cells(&cells, dims);

    let obs_mean = cells.iter().map(|c| c.1).sum::<f64>() / cells.len() as f64;
    let obs_var = cells
        .iter()
        .map(|c| (c.1 - obs_mean).powi(2))
        .sum::<f64>()
        / cells.len() as f64;
    // Gamma prior on α: shape 2, rate 2·variance (floored to stay proper
    // when all observed values coincide)
    let a0 = 2.0;
    let b0 = (2.0 * obs_var).max(1e-3);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (d as f64).sqrt();
    let normal = |rng: &mut ChaCha8Rng| {
        <rand_distr::StandardNormal as Distribution<f64>>::sample(&rand_distr::StandardNormal, rng)
    };
    let mut learner = Array2::from_shape_fn((u, d), |_| normal(&mut rng) * scale);
    let mut question = Array2::from_shape_fn((n, d), |_| normal(&mut rng) * scale);
    let mut attempt = Array2::from_shape_fn((m, d), |_| normal(&mut rng) * scale);
    let mut alpha = 1.0 / obs_var.max(1e-3);

    let mut events = 0usize;
    let mut retained = Vec::with_capacity(cfg.samples);
    let total = cfg.burn_in + cfg.samples;
    for sweep in 0..total {
        let (mu_u, lam_u) = sample_hyper(&learner, &mut rng, &mut events)?;
        let (mu_i, lam_i) = sample_hyper(&question, &mut rng, &mut events)?;
        let (mu_m, lam_m) = sample_hyper(&attempt, &mut rng, &mut events)?;
        sample_factor_rows(
            &mut learner, &question, &attempt, &by_u, &mu_u, &lam_u, alpha, &mut rng, &mut events,
        )?;
        sample_factor_rows(
            &mut question, &learner, &attempt, &by_i, &mu_i, &lam_i, alpha, &mut rng, &mut events,
        )?;
        sample_factor_rows(
            &mut attempt, &learner, &question, &by_m, &mu_m, &lam_m, alpha, &mut rng, &mut events,
        )?;
        // α | rest ~ Gamma(a0 + n_obs/2, rate b0 + SSE/2)
        let mut sse = 0.0;
        for &((uu, i, mm), tau) in &cells {
            let mut p = 0.0;
            for k in 0..d {
                p += learner[(uu, k)] * question[(i, k)] * attempt[(mm, k)];
            }
            let e = p - tau;
            sse += e * e;
        }
        if !sse.is_finite() {
            return Err(Error::Divergence { iteration: sweep });
        }
        let shape = a0 + cells.len() as f64 / 2.0;
        let rate = b0 + sse / 2.0;
        let g = Gamma::new(shape, 1.0 / rate)
            .map_err(|_| Error::NonFinite {
                context: "precision conditional".to_string(),
            })?;
        alpha = g.sample(&mut rng).max(1e-12);
        if sweep >= cfg.burn_in {
            retained.push(BptfSample {
                learner: learner.clone(),
                question: question.clone(),
                attempt: attempt.clone(),
                precision: alpha,
            });
        }
    }

    Ok(BptfModel {
        samples: retained,
        config: *cfg,
        regularization_events: events,
    })
}

impl BptfModel {
    /// Posterior predictive mean: average of per-sample reconstructions.
    pub fn reconstruct(&self) -> Array3<f64> {
        let mut acc = reconstruct_one(&self.samples[0]);
        for s in &self.samples[1..] {
            acc += &reconstruct_one(s);
        }
        acc / self.samples.len() as f64
    }

    /// Per-cell variance of the reconstruction across retained samples.
    pub fn predictive_variance(&self) -> Array3<f64> {
        let mean = self.reconstruct();
        let mut acc = Array3::zeros(mean.dim());
        for s in &self.samples {
            let r = reconstruct_one(s);
            acc += &(&r - &mean).mapv(|v| v * v);
        }
        acc / self.samples.len() as f64
    }

    pub fn predict(&self, t: &PerfTensor) -> Result<DenseTensor> {
        let s = &self.samples[0];
        let dims = (s.learner.nrows(), s.question.nrows(), s.attempt.nrows());
        if dims != t.dims() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", t.dims()),
                found: format!("{dims:?}"),
            });
        }
        DenseTensor::new(self.reconstruct().mapv(|v| v.clamp(0.0, 1.0))).clamp01()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::CellValue;
    use ndarray::Array3 as A3;
    use rand::Rng;

    fn ids(p: &str, k: usize) -> Vec<String> {
        (0..k).map(|i| format!("{p}{i}")).collect()
    }

    /// Binary rank-1 tensor with ~25% of cells held out.
    fn rank1_holdout() -> (A3<f64>, PerfTensor, Vec<(usize, usize, usize)>) {
        let (u, n, m) = (20, 8, 4);
        let mut truth = A3::zeros((u, n, m));
        let mut cells = A3::from_elem((u, n, m), CellValue::Missing);
        let mut held = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for uu in 0..u {
            for i in 0..n {
                for mm in 0..m {
                    let v = if uu % 2 == 0 && i % 2 == 0 { 1.0 } else { 0.0 };
                    truth[(uu, i, mm)] = v;
                    if rng.random::<f64>() < 0.25 {
                        held.push((uu, i, mm));
                    } else {
                        cells[(uu, i, mm)] = if v >= 0.5 {
                            CellValue::Correct
                        } else {
                            CellValue::Incorrect
                        };
                    }
                }
            }
        }
        (
            truth,
            PerfTensor::new(cells, ids("L", u), ids("Q", n)).unwrap(),
            held,
        )
    }

    #[test]
    fn rank1_holdout_rmse_below_point_one() {
        let (truth, t, held) = rank1_holdout();
        let cfg = BptfConfig {
            rank: 2,
            burn_in: 30,
            samples: 30,
            seed: 1,
        };
        let model = bptf_fit(&t, &cfg).unwrap();
        let pred = model.predict(&t).unwrap();
        let mut sq = 0.0;
        for &idx in &held {
            let e = pred.get(idx.0, idx.1, idx.2) - truth[idx];
            sq += e * e;
        }
        let rmse = (sq / held.len() as f64).sqrt();
        assert!(rmse < 0.1, "held-out RMSE {rmse}");
    }

    #[test]
    fn single_sample_predictive_is_that_reconstruction() {
        let (_, t, _) = rank1_holdout();
        let cfg = BptfConfig {
            rank: 2,
            burn_in: 0,
            samples: 1,
            seed: 2,
        };
        let model = bptf_fit(&t, &cfg).unwrap();
        assert_eq!(model.samples.len(), 1);
        let mean = model.reconstruct();
        let one = reconstruct_one(&model.samples[0]);
        assert_eq!(mean, one);
    }

    #[test]
    fn chains_deterministic_per_seed() {
        let (_, t, _) = rank1_holdout();
        let cfg = BptfConfig {
            rank: 2,
            burn_in: 3,
            samples: 3,
            seed: 5,
        };
        let a = bptf_fit(&t, &cfg).unwrap();
        let b = bptf_fit(&t, &cfg).unwrap();
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x.learner, y.learner);
            assert_eq!(x.precision, y.precision);
        }
        let c = bptf_fit(&t, &BptfConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.samples[0].learner, c.samples[0].learner);
    }

    #[test]
    fn precision_positive_and_variance_non_negative() {
        let (_, t, _) = rank1_holdout();
        let cfg = BptfConfig {
            rank: 2,
            burn_in: 5,
            samples: 10,
            seed: 3,
        };
        let model = bptf_fit(&t, &cfg).unwrap();
        assert!(model.samples.iter().all(|s| s.precision > 0.0));
        assert!(model.predictive_variance().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn empty_tensor_rejected() {
        let t = PerfTensor::new(
            A3::from_elem((2, 2, 2), CellValue::Missing),
            ids("L", 2),
            ids("Q", 2),
        )
        .unwrap();
        assert!(bptf_fit(&t, &BptfConfig::default()).is_err());
        assert!(BptfConfig {
            samples: 0,
            ..BptfConfig::default()
        }
        .validate()
        .is_err());
    }
}
