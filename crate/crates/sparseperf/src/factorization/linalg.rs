//! Small dense symmetric linear algebra for the Gibbs sampler: Cholesky
//! factorization, triangular solves, and samplers for multivariate
//! normal and Wishart distributions.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix, or None if a pivot is non-positive.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[(i, j)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solve L y = b for lower-triangular L.
pub fn solve_lower(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = b.len();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solve Lᵀ x = y for lower-triangular L.
pub fn solve_upper_t(l: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
    let n = y.len();
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solve (L Lᵀ) x = b.
pub fn chol_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    solve_upper_t(l, &solve_lower(l, b))
}

/// Draw from N(mean, Λ⁻¹) given the Cholesky factor L of the precision
/// Λ = L Lᵀ: x = mean + L⁻ᵀ z has the required covariance.
pub fn sample_mvn_precision(
    mean: &Array1<f64>,
    prec_chol: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Array1<f64> {
    let z = Array1::from_shape_fn(mean.len(), |_| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    });
    mean + &solve_upper_t(prec_chol, &z)
}

/// Wishart(scale, dof) draw via the Bartlett decomposition. `scale_chol`
/// is the lower Cholesky factor of the scale matrix; dof must exceed
/// dim − 1.
pub fn sample_wishart(scale_chol: &Array2<f64>, dof: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = scale_chol.nrows();
    let mut a: Array2<f64> = Array2::zeros((d, d));
    for i in 0..d {
        // chi-square with (dof − i) degrees of freedom
        let g = Gamma::new((dof - i as f64) / 2.0, 2.0).expect("valid chi-square dof");
        a[(i, i)] = g.sample(rng).max(1e-300).sqrt();
        for j in 0..i {
            a[(i, j)] = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        }
    }
    let la = scale_chol.dot(&a);
    la.dot(&la.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn cholesky_matches_hand_factor() {
        // A = [[4,2],[2,3]] -> L = [[2,0],[1,sqrt(2)]]
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky(&a).unwrap();
        assert!((l[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((l[(1, 0)] - 1.0).abs() < 1e-12);
        assert!((l[(1, 1)] - 2f64.sqrt()).abs() < 1e-12);
        let rebuilt = l.dot(&l.t());
        for (x, y) in rebuilt.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        assert!(cholesky(&array![[1.0, 2.0], [2.0, 1.0]]).is_none());
        assert!(cholesky(&array![[-1.0]]).is_none());
    }

    #[test]
    fn chol_solve_matches_direct_inverse() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky(&a).unwrap();
        let b = array![1.0, 2.0];
        let x = chol_solve(&l, &b);
        let ax = a.dot(&x);
        for (u, v) in ax.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn mvn_sample_moments() {
        // precision [[4,0],[0,1]] -> covariance diag(0.25, 1)
        let prec = array![[4.0, 0.0], [0.0, 1.0]];
        let l = cholesky(&prec).unwrap();
        let mean = array![1.0, -2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20000;
        let mut sum = Array1::<f64>::zeros(2);
        let mut sq = Array1::<f64>::zeros(2);
        for _ in 0..n {
            let x = sample_mvn_precision(&mean, &l, &mut rng);
            sum += &x;
            sq += &x.mapv(|v| v * v);
        }
        let m = sum / n as f64;
        let var = sq / n as f64 - m.mapv(|v| v * v);
        assert!((m[0] - 1.0).abs() < 0.02);
        assert!((m[1] + 2.0).abs() < 0.03);
        assert!((var[0] - 0.25).abs() < 0.02);
        assert!((var[1] - 1.0).abs() < 0.05);
    }

    #[test]
    fn wishart_mean_is_dof_times_scale() {
        let scale = array![[1.0, 0.3], [0.3, 2.0]];
        let l = cholesky(&scale).unwrap();
        let dof = 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20000;
        let mut acc = Array2::<f64>::zeros((2, 2));
        for _ in 0..n {
            acc += &sample_wishart(&l, dof, &mut rng);
        }
        acc /= n as f64;
        for (got, want) in acc.iter().zip(scale.iter().map(|&s| dof * s)) {
            assert!((got - want).abs() < 0.15 * want.abs().max(1.0), "{got} vs {want}");
        }
    }
}
