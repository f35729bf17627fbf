//! Randomized invariant checks for the core data structures and
//! metrics.

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use sparseperf::eval::{make_folds, rmse, spearman};
use sparseperf::tensor::{merge_imputed, CellValue, DenseTensor, PerfTensor};

fn ids(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}{i}")).collect()
}

fn arb_tensor() -> impl Strategy<Value = PerfTensor> {
    (1usize..6, 1usize..6, 1usize..5)
        .prop_flat_map(|(u, n, m)| {
            let cells = proptest::collection::vec(0u8..3, u * n * m);
            (Just((u, n, m)), cells)
        })
        .prop_map(|((u, n, m), raw)| {
            let cells = Array3::from_shape_fn((u, n, m), |(a, b, c)| {
                match raw[(a * n + b) * m + c] {
                    0 => CellValue::Missing,
                    1 => CellValue::Incorrect,
                    _ => CellValue::Correct,
                }
            });
            PerfTensor::new(cells, ids("L", u), ids("Q", n)).expect("valid dims")
        })
}

proptest! {
    #[test]
    fn sparsity_equals_missing_fraction(t in arb_tensor()) {
        let (u, n, m) = t.dims();
        let mut missing = 0usize;
        for uu in 0..u {
            for i in 0..n {
                for mm in 0..m {
                    if t.get(uu, i, mm) == CellValue::Missing {
                        missing += 1;
                    }
                }
            }
        }
        let want = missing as f64 / (u * n * m) as f64;
        prop_assert!((t.sparsity_level() - want).abs() < 1e-15);
        prop_assert_eq!(t.observed_count(), u * n * m - missing);
    }

    #[test]
    fn merge_preserves_observed_and_is_idempotent(
        t in arb_tensor(),
        fills in proptest::collection::vec(0.0f64..1.0, 64),
    ) {
        let (_, n, m) = t.dims();
        let slice = t.slice_learner(0).unwrap();
        let gen = Array2::from_shape_fn((n, m), |(i, j)| fills[(i * m + j) % fills.len()]);
        let merged = merge_imputed(&slice, &gen).unwrap();
        for i in 0..n {
            for j in 0..m {
                if slice.mask()[(i, j)] == 1.0 {
                    prop_assert_eq!(merged[(i, j)], slice.values()[(i, j)]);
                } else {
                    prop_assert_eq!(merged[(i, j)], gen[(i, j)]);
                }
            }
        }
        // merging the merged matrix back changes nothing
        let again = merge_imputed(&slice, &merged).unwrap();
        prop_assert_eq!(&again, &merged);
    }

    #[test]
    fn folds_partition_observed(t in arb_tensor(), folds in 1usize..5, seed in 0u64..1000) {
        let mask = t.mask();
        let total = t.observed_count();
        prop_assume!(total >= folds);
        let fa = make_folds(&mask, folds, seed).unwrap();
        let mut seen = std::collections::HashSet::new();
        for group in &fa.folds {
            for &c in group {
                prop_assert!(seen.insert(c));
                prop_assert_eq!(mask.get(c.0, c.1, c.2), 1);
            }
        }
        prop_assert_eq!(seen.len(), total);
        let sizes: Vec<usize> = fa.folds.iter().map(|f| f.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        // same seed reproduces the same partition
        let fb = make_folds(&mask, folds, seed).unwrap();
        prop_assert_eq!(&fa.folds, &fb.folds);
    }

    #[test]
    fn spearman_symmetry_and_rank_invariance(
        xs in proptest::collection::vec(-100.0f64..100.0, 3..20),
        ys_raw in proptest::collection::vec(-100.0f64..100.0, 20),
    ) {
        let ys: Vec<f64> = ys_raw[..xs.len()].to_vec();
        let r = spearman(&xs, &ys);
        let rev = spearman(&ys, &xs);
        match (r, rev) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
                // strictly increasing transform leaves ranks unchanged
                let tx: Vec<f64> = xs.iter().map(|v| v * 3.0 + 7.0).collect();
                let c = spearman(&tx, &ys).unwrap();
                prop_assert!((a - c).abs() < 1e-12);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "symmetry broken in error behavior"),
        }
    }

    #[test]
    fn rmse_permutation_invariant(
        vals in proptest::collection::vec((0usize..3, 0usize..3, 0usize..3, 0.0f64..1.0), 1..20),
    ) {
        let pred = DenseTensor::new(Array3::from_shape_fn((3, 3, 3), |(u, i, m)| {
            ((u * 9 + i * 3 + m) as f64 * 0.37).fract()
        }));
        let cells: Vec<((usize, usize, usize), f64)> =
            vals.iter().map(|&(u, i, m, v)| ((u, i, m), v)).collect();
        let mut rev = cells.clone();
        rev.reverse();
        let a = rmse(&pred, &cells).unwrap();
        let b = rmse(&pred, &rev).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
