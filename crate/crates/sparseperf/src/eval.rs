//! Evaluation protocol: cell-level k-fold cross-validation repeated
//! over cycles, RMSE scoring, rank correlation, sparsity profiling, and
//! benchmark report assembly.
//!
//! Folds are drawn uniformly over observed cells. Each cycle uses a
//! seed derived from the plan's base seed, so the whole benchmark is
//! reproducible bit for bit.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::{bptf_fit, cpd_fit, tf_fit, BptfConfig, GdConfig};
use crate::gain::{self, GainConfig};
use crate::gan::{gan_impute, gan_train, GanConfig};
use crate::tensor::{DenseTensor, MaskTensor, PerfTensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CvPlan {
    pub cycles: usize,
    pub folds: usize,
    pub base_seed: u64,
}

impl Default for CvPlan {
    fn default() -> Self {
        CvPlan {
            cycles: 5,
            folds: 5,
            base_seed: 0,
        }
    }
}

impl CvPlan {
    pub fn validate(&self) -> Result<()> {
        if self.cycles == 0 || self.folds == 0 {
            return Err(Error::InvalidConfig(
                "cycles and folds must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Seed for one cycle's fold partition; distinct per cycle.
    pub fn cycle_seed(&self, cycle: usize) -> u64 {
        self.base_seed.wrapping_add(cycle as u64)
    }

    /// Seed handed to a method for one (cycle, fold) fit; distinct per
    /// pair.
    pub fn fit_seed(&self, cycle: usize, fold: usize) -> u64 {
        self.base_seed
            .wrapping_add(((cycle * self.folds + fold + 1) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }
}

/// Partition of the observed cells into folds.
#[derive(Debug, Clone)]
pub struct FoldAssignment {
    pub folds: Vec<Vec<(usize, usize, usize)>>,
}

/// Seeded uniform shuffle of the observed coordinates, dealt round-robin
/// into `folds` groups, so sizes differ by at most one.
pub fn make_folds(mask: &MaskTensor, folds: usize, seed: u64) -> Result<FoldAssignment> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if folds == 0 {
        return Err(Error::InvalidConfig("folds must be positive".into()));
    }
    let mut coords = mask.observed_coords();
    if coords.len() < folds {
        return Err(Error::TooFewObserved {
            have: coords.len(),
            need: folds,
        });
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    let mut groups = vec![Vec::new(); folds];
    for (j, c) in coords.into_iter().enumerate() {
        groups[j % folds].push(c);
    }
    Ok(FoldAssignment { folds: groups })
}

/// √(mean squared error) of `pred` against the listed truth cells.
pub fn rmse(pred: &DenseTensor, cells: &[((usize, usize, usize), f64)]) -> Result<f64> {
    if cells.is_empty() {
        return Err(Error::EmptyCells);
    }
    let dims = pred.values().dim();
    let mut sq = 0.0;
    for &((u, i, m), truth) in cells {
        if u >= dims.0 || i >= dims.1 || m >= dims.2 {
            return Err(Error::IndexOutOfRange {
                index: u.max(i).max(m),
                limit: dims.0.max(dims.1).max(dims.2),
            });
        }
        let e = pred.get(u, i, m) - truth;
        sq += e * e;
    }
    Ok((sq / cells.len() as f64).sqrt())
}

/// Average ranks with ties receiving the mean of their rank range.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j share the same value; ranks are 1-based
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "constant input has no rank ordering".to_string(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", xs.len()),
            found: format!("{} values", ys.len()),
        });
    }
    if xs.len() < 2 {
        return Err(Error::InvalidConfig(
            "correlation needs at least two points".into(),
        ));
    }
    if xs.iter().chain(ys.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "correlation input".to_string(),
        });
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Output of one fit-and-impute run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub prediction: DenseTensor,
    /// Per-iteration observed RMSE, when the method tracks one.
    pub curve: Option<Vec<(usize, f64)>>,
}

/// A method that completes a sparse tensor. `seed` overrides the
/// method's configured seed so cross-validation cells stay independent.
pub trait Imputer: Sync {
    fn name(&self) -> &str;
    fn fit_impute(&self, t: &PerfTensor, seed: u64) -> Result<FitReport>;
}

pub struct GainMethod(pub GainConfig);

impl Imputer for GainMethod {
    fn name(&self) -> &str {
        "gain"
    }

    fn fit_impute(&self, t: &PerfTensor, seed: u64) -> Result<FitReport> {
        let cfg = GainConfig { seed, ..self.0 };
        let model = gain::train(t, &cfg)?;
        Ok(FitReport {
            prediction: gain::impute(&model, t)?,
            curve: Some(model.training_curve),
        })
    }
}

pub struct GanMethod(pub GanConfig);

impl Imputer for GanMethod {
    fn name(&self) -> &str {
        "gan"
    }

    fn fit_impute(&self, t: &PerfTensor, seed: u64) -> Result<FitReport> {
        let cfg = GanConfig { seed, ..self.0 };
        let model = gan_train(t, &cfg)?;
        Ok(FitReport {
            prediction: gan_impute(&model, t)?,
            curve: Some(model.training_curve),
        })
    }
}

pub struct TfMethod(pub GdConfig);

impl Imputer for TfMethod {
    fn name(&self) -> &str {
        "tf"
    }

    fn fit_impute(&self, t: &PerfTensor, seed: u64) -> Result<FitReport> {
        let cfg = GdConfig { seed, ..self.0 };
        let model = tf_fit(t, &cfg)?;
        Ok(FitReport {
            prediction: model.predict(t)?,
            curve: Some(model.training_curve),
        })
    }
}

pub struct CpdMethod(pub GdConfig);

impl Imputer for CpdMethod {
    fn name(&self) -> &str {
        "cpd"
    }

    fn fit_impute(&self, t: &PerfTensor, seed: u64) -> Result<FitReport> {
        let cfg = GdConfig { seed, ..self.0 };
        let model = cpd_fit(t, &cfg)?;
        Ok(FitReport {
            prediction: model.predict(t)?,
            curve: Some(model.training_curve),
        })
    }
}

pub struct BptfMethod(pub BptfConfig);

impl Imputer for BptfMethod {
    fn name(&self) -> &str {
        "bptf"
    }

    fn fit_impute(&self, t: &PerfTensor, seed: u64) -> Result<FitReport> {
        let cfg = BptfConfig { seed, ..self.0 };
        let model = bptf_fit(t, &cfg)?;
        Ok(FitReport {
            prediction: model.predict(t)?,
            curve: None,
        })
    }
}

/// Baseline that fills every cell with the global observed mean.
pub struct MeanImputer;

impl Imputer for MeanImputer {
    fn name(&self) -> &str {
        "mean"
    }

    fn fit_impute(&self, t: &PerfTensor, _seed: u64) -> Result<FitReport> {
        let mean = t.observed_mean().ok_or(Error::EmptyCells)?;
        let mut out = ndarray::Array3::from_elem(t.dims(), mean);
        let (u, n, m) = t.dims();
        for uu in 0..u {
            for i in 0..n {
                for mm in 0..m {
                    if let Some(v) = t.get(uu, i, mm).to_f64() {
                        out[(uu, i, mm)] = v;
                    }
                }
            }
        }
        Ok(FitReport {
            prediction: DenseTensor::new(out).clamp01()?,
            curve: None,
        })
    }
}

/// Hide each fold in turn, fit on the remainder, score RMSE on the
/// hidden cells; `cycles × folds` values in (cycle, fold) order.
pub fn run_cv(t: &PerfTensor, method: &dyn Imputer, plan: &CvPlan) -> Result<Vec<f64>> {
    plan.validate()?;
    let mut out = Vec::with_capacity(plan.cycles * plan.folds);
    for cycle in 0..plan.cycles {
        let assignment = make_folds(&t.mask(), plan.folds, plan.cycle_seed(cycle))?;
        for (fold, cells) in assignment.folds.iter().enumerate() {
            let fail = |source: Error| Error::MethodFailure {
                method: method.name().to_string(),
                cycle,
                fold,
                source: Box::new(source),
            };
            let train = t.with_cells_hidden(cells).map_err(fail)?;
            let report = method
                .fit_impute(&train, plan.fit_seed(cycle, fold))
                .map_err(fail)?;
            let truth: Vec<((usize, usize, usize), f64)> = cells
                .iter()
                .map(|&(u, i, m)| {
                    ((u, i, m), t.get(u, i, m).to_f64().expect("cells are observed"))
                })
                .collect();
            out.push(rmse(&report.prediction, &truth).map_err(fail)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmseRow {
    pub dataset: String,
    pub method: String,
    pub max_attempts: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpearmanRow {
    pub dataset: String,
    pub method: String,
    /// None when every mean coincides and the rank ordering is undefined.
    pub spearman_rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityRow {
    pub dataset: String,
    pub max_attempts: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub dataset: String,
    pub method: String,
    pub iteration: usize,
    pub rmse: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkReport {
    pub rmse_rows: Vec<RmseRow>,
    pub spearman_rows: Vec<SpearmanRow>,
    pub sparsity_rows: Vec<SparsityRow>,
    pub curve_rows: Vec<CurveRow>,
}

/// Full grid: for every dataset × max-attempts truncation, run CV for
/// every method; then correlate each method's mean RMSE against the
/// attempts range. Grid cells execute in parallel; output ordering is
/// canonical regardless of schedule.
pub fn run_benchmark(
    datasets: &[(String, PerfTensor)],
    methods: &[Box<dyn Imputer>],
    attempts_range: &[usize],
    plan: &CvPlan,
) -> Result<BenchmarkReport> {
    plan.validate()?;
    if datasets.is_empty() || methods.is_empty() || attempts_range.is_empty() {
        return Err(Error::InvalidConfig(
            "benchmark needs at least one dataset, method and attempts value".into(),
        ));
    }
    for (name, t) in datasets {
        let (_, _, m) = t.dims();
        for &a in attempts_range {
            if a == 0 || a > m {
                return Err(Error::InvalidConfig(format!(
                    "max_attempts {a} outside 1..={m} for dataset {name}"
                )));
            }
        }
    }

    let mut sparsity_rows = Vec::new();
    for (name, t) in datasets {
        for &a in attempts_range {
            sparsity_rows.push(SparsityRow {
                dataset: name.clone(),
                max_attempts: a,
                sparsity: t.truncate_attempts(a)?.sparsity_level(),
            });
        }
    }

    struct Task<'a> {
        dataset: &'a str,
        tensor: PerfTensor,
        method_idx: usize,
        max_attempts: usize,
    }
    let mut tasks = Vec::new();
    for (name, t) in datasets {
        for &a in attempts_range {
            let truncated = t.truncate_attempts(a)?;
            for mi in 0..methods.len() {
                tasks.push(Task {
                    dataset: name,
                    tensor: truncated.clone(),
                    method_idx: mi,
                    max_attempts: a,
                });
            }
        }
    }

    let results: Vec<Result<(RmseRow, Vec<CurveRow>)>> = tasks
        .par_iter()
        .map(|task| {
            let method = &methods[task.method_idx];
            let values = run_cv(&task.tensor, method.as_ref(), plan)?;
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            // training curve recorded once per dataset × method, from a
            // clean fit at the largest truncation
            let curves = if task.max_attempts == *attempts_range.iter().max().unwrap() {
                match method.fit_impute(&task.tensor, plan.base_seed)?.curve {
                    Some(c) => c
                        .into_iter()
                        .map(|(iteration, r)| CurveRow {
                            dataset: task.dataset.to_string(),
                            method: method.name().to_string(),
                            iteration,
                            rmse: r,
                        })
                        .collect(),
                    None => Vec::new(),
                }
            } else {
                Vec::new()
            };
            Ok((
                RmseRow {
                    dataset: task.dataset.to_string(),
                    method: method.name().to_string(),
                    max_attempts: task.max_attempts,
                    rmse_mean: mean,
                    rmse_std: var.sqrt(),
                },
                curves,
            ))
        })
        .collect();

    let mut rmse_rows = Vec::new();
    let mut curve_rows = Vec::new();
    for r in results {
        let (row, curves) = r?;
        rmse_rows.push(row);
        curve_rows.extend(curves);
    }
    rmse_rows.sort_by(|a, b| {
        (&a.dataset, &a.method, a.max_attempts).cmp(&(&b.dataset, &b.method, b.max_attempts))
    });
    curve_rows.sort_by(|a, b| {
        (&a.dataset, &a.method, a.iteration).cmp(&(&b.dataset, &b.method, b.iteration))
    });

    let mut spearman_rows = Vec::new();
    for (name, _) in datasets {
        for method in methods {
            let means: Vec<f64> = rmse_rows
                .iter()
                .filter(|r| r.dataset == *name && r.method == method.name())
                .map(|r| r.rmse_mean)
                .collect();
            let xs: Vec<f64> = attempts_range.iter().map(|&a| a as f64).collect();
            let rho = if xs.len() < 2 {
                None
            } else {
                match spearman(&xs, &means) {
                    Ok(r) => Some(r),
                    Err(Error::UndefinedCorrelation(_)) => None,
                    Err(e) => return Err(e),
                }
            };
            spearman_rows.push(SpearmanRow {
                dataset: name.clone(),
                method: method.name().to_string(),
                spearman_rho: rho,
            });
        }
    }
    spearman_rows.sort_by(|a, b| (&a.dataset, &a.method).cmp(&(&b.dataset, &b.method)));

    Ok(BenchmarkReport {
        rmse_rows,
        spearman_rows,
        sparsity_rows,
        curve_rows,
    })
}

impl BenchmarkReport {
    pub fn write_rmse_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "dataset,method,max_attempts,rmse_mean,rmse_std")?;
        for r in &self.rmse_rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.dataset, r.method, r.max_attempts, r.rmse_mean, r.rmse_std
            )?;
        }
        Ok(())
    }

    pub fn write_spearman_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "dataset,method,spearman_rho")?;
        for r in &self.spearman_rows {
            match r.spearman_rho {
                Some(rho) => writeln!(w, "{},{},{rho}", r.dataset, r.method)?,
                None => writeln!(w, "{},{},undefined", r.dataset, r.method)?,
            }
        }
        Ok(())
    }

    pub fn write_sparsity_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "dataset,max_attempts,sparsity")?;
        for r in &self.sparsity_rows {
            writeln!(w, "{},{},{}", r.dataset, r.max_attempts, r.sparsity)?;
        }
        Ok(())
    }

    pub fn write_curves_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "dataset,method,iteration,rmse")?;
        for r in &self.curve_rows {
            writeln!(w, "{},{},{},{}", r.dataset, r.method, r.iteration, r.rmse)?;
        }
        Ok(())
    }

    /// Hierarchical key-value text report.
    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut datasets: Vec<&str> = self.rmse_rows.iter().map(|r| r.dataset.as_str()).collect();
        datasets.dedup();
        for ds in datasets {
            writeln!(w, "dataset: {ds}")?;
            for s in self.sparsity_rows.iter().filter(|s| s.dataset == ds) {
                writeln!(w, "  sparsity[max_attempts={}]: {}", s.max_attempts, s.sparsity)?;
            }
            let mut methods: Vec<&str> = self
                .rmse_rows
                .iter()
                .filter(|r| r.dataset == ds)
                .map(|r| r.method.as_str())
                .collect();
            methods.dedup();
            for m in methods {
                writeln!(w, "  method: {m}")?;
                for r in self
                    .rmse_rows
                    .iter()
                    .filter(|r| r.dataset == ds && r.method == m)
                {
                    writeln!(
                        w,
                        "    rmse[max_attempts={}]: mean={} std={}",
                        r.max_attempts, r.rmse_mean, r.rmse_std
                    )?;
                }
                if let Some(s) = self
                    .spearman_rows
                    .iter()
                    .find(|s| s.dataset == ds && s.method == m)
                {
                    match s.spearman_rho {
                        Some(rho) => writeln!(w, "    spearman_rho: {rho}")?,
                        None => writeln!(w, "    spearman_rho: undefined")?,
                    }
                }
            }
        }
        Ok(())
    }

    /// Methods ordered by overall mean RMSE, best first.
    pub fn ranking(&self) -> Vec<(String, f64)> {
        let mut methods: Vec<String> = self.rmse_rows.iter().map(|r| r.method.clone()).collect();
        methods.sort();
        methods.dedup();
        let mut out: Vec<(String, f64)> = methods
            .into_iter()
            .map(|m| {
                let vals: Vec<f64> = self
                    .rmse_rows
                    .iter()
                    .filter(|r| r.method == m)
                    .map(|r| r.rmse_mean)
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                (m, mean)
            })
            .collect();
        out.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite means"));
        out
    }
}
