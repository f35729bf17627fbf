//! 3D performance tensor, mask derivation, learner slicing, attempt
//! truncation, sparsity measurement and the observed/generated merge.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// One cell of the performance tensor.
///
/// Missing is a distinct state; it is never encoded as 0.0 internally.
/// Numeric fills happen only at serialization or network-input boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellValue {
    Correct,
    Incorrect,
    Missing,
}

impl CellValue {
    pub fn to_f64(self) -> Option<f64> {
        match self {
            CellValue::Correct => Some(1.0),
            CellValue::Incorrect => Some(0.0),
            CellValue::Missing => None,
        }
    }

    pub fn from_outcome(outcome: u8) -> CellValue {
        if outcome == 1 {
            CellValue::Correct
        } else {
            CellValue::Incorrect
        }
    }

    pub fn is_missing(self) -> bool {
        matches!(self, CellValue::Missing)
    }
}

/// Dense learner × question × attempt tensor of observed outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfTensor {
    cells: Array3<CellValue>,
    learner_ids: Vec<String>,
    question_ids: Vec<String>,
}

impl PerfTensor {
    pub fn new(
        cells: Array3<CellValue>,
        learner_ids: Vec<String>,
        question_ids: Vec<String>,
    ) -> Result<Self> {
        let (u, n, m) = cells.dim();
        if u == 0 || n == 0 || m == 0 {
            return Err(Error::InvalidConfig(format!(
                "tensor dims must all be >= 1, got ({u}, {n}, {m})"
            )));
        }
        if learner_ids.len() != u {
            return Err(Error::InvalidConfig(format!(
                "{} learner ids for {} learners",
                learner_ids.len(),
                u
            )));
        }
        if question_ids.len() != n {
            return Err(Error::InvalidConfig(format!(
                "{} question ids for {} questions",
                question_ids.len(),
                n
            )));
        }
        for (name, ids) in [("learner", &learner_ids), ("question", &question_ids)] {
            let mut seen = std::collections::HashSet::new();
            for id in ids.iter() {
                if !seen.insert(id.as_str()) {
                    return Err(Error::InvalidConfig(format!("duplicate {name} id `{id}`")));
                }
            }
        }
        Ok(PerfTensor {
            cells,
            learner_ids,
            question_ids,
        })
    }

    /// (U, N, M) = (learners, questions, attempts).
    pub fn dims(&self) -> (usize, usize, usize) {
        self.cells.dim()
    }

    pub fn cells(&self) -> &Array3<CellValue> {
        &self.cells
    }

    pub fn learner_ids(&self) -> &[String] {
        &self.learner_ids
    }

    pub fn question_ids(&self) -> &[String] {
        &self.question_ids
    }

    pub fn get(&self, u: usize, i: usize, m: usize) -> CellValue {
        self.cells[(u, i, m)]
    }

    /// Binary observedness indicator: 1 where the cell is non-Missing.
    pub fn mask(&self) -> MaskTensor {
        MaskTensor {
            bits: self.cells.map(|c| u8::from(!c.is_missing())),
        }
    }

    /// Fraction of Missing cells over all U·N·M cells.
    pub fn sparsity_level(&self) -> f64 {
        let missing = self.cells.iter().filter(|c| c.is_missing()).count();
        missing as f64 / self.cells.len() as f64
    }

    pub fn observed_count(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_missing()).count()
    }

    /// Observed coordinates with their numeric values, row-major order.
    pub fn observed_cells(&self) -> Vec<((usize, usize, usize), f64)> {
        let mut out = Vec::new();
        for ((u, i, m), c) in self.cells.indexed_iter() {
            if let Some(v) = c.to_f64() {
                out.push(((u, i, m), v));
            }
        }
        out
    }

    /// Mean of observed values; None when everything is missing.
    pub fn observed_mean(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for c in self.cells.iter() {
            if let Some(v) = c.to_f64() {
                sum += v;
                count += 1;
            }
        }
        (count > 0).then(|| sum / count as f64)
    }

    /// The u-th question × attempt slice together with its mask.
    pub fn slice_learner(&self, u: usize) -> Result<LearnerMatrix> {
        let (uu, n, m) = self.dims();
        if u >= uu {
            return Err(Error::IndexOutOfRange { index: u, limit: uu });
        }
        let mut values = Array2::from_elem((n, m), f64::NAN);
        let mut mask = Array2::zeros((n, m));
        for i in 0..n {
            for mm in 0..m {
                if let Some(v) = self.cells[(u, i, mm)].to_f64() {
                    values[(i, mm)] = v;
                    mask[(i, mm)] = 1.0;
                }
            }
        }
        Ok(LearnerMatrix {
            learner_index: u,
            values,
            mask,
        })
    }

    /// Restrict to the first `m_max` attempt layers.
    pub fn truncate_attempts(&self, m_max: usize) -> Result<PerfTensor> {
        let (u, n, m) = self.dims();
        if m_max < 1 || m_max > m {
            return Err(Error::InvalidConfig(format!(
                "m_max must be in 1..={m}, got {m_max}"
            )));
        }
        let mut cells = Array3::from_elem((u, n, m_max), CellValue::Missing);
        for uu in 0..u {
            for i in 0..n {
                for mm in 0..m_max {
                    cells[(uu, i, mm)] = self.cells[(uu, i, mm)];
                }
            }
        }
        PerfTensor::new(cells, self.learner_ids.clone(), self.question_ids.clone())
    }

    /// Copy with the listed cells set Missing. Used for fold holdout.
    pub fn with_cells_hidden(&self, hidden: &[(usize, usize, usize)]) -> Result<PerfTensor> {
        let (u, n, m) = self.dims();
        let mut cells = self.cells.clone();
        for &(uu, i, mm) in hidden {
            if uu >= u || i >= n || mm >= m {
                return Err(Error::IndexOutOfRange {
                    index: uu.max(i).max(mm),
                    limit: u.max(n).max(m),
                });
            }
            cells[(uu, i, mm)] = CellValue::Missing;
        }
        PerfTensor::new(cells, self.learner_ids.clone(), self.question_ids.clone())
    }
}

/// Binary observedness tensor matching a [`PerfTensor`]'s shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTensor {
    bits: Array3<u8>,
}

impl MaskTensor {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.bits.dim()
    }

    pub fn bits(&self) -> &Array3<u8> {
        &self.bits
    }

    pub fn get(&self, u: usize, i: usize, m: usize) -> u8 {
        self.bits[(u, i, m)]
    }

    /// Observed coordinates in row-major order.
    pub fn observed_coords(&self) -> Vec<(usize, usize, usize)> {
        self.bits
            .indexed_iter()
            .filter(|(_, &b)| b == 1)
            .map(|(c, _)| c)
            .collect()
    }
}

/// One learner's question × attempt slice. Missing cells hold NaN in
/// `values`; `mask` is authoritative for observedness.
#[derive(Debug, Clone)]
pub struct LearnerMatrix {
    learner_index: usize,
    values: Array2<f64>,
    mask: Array2<f64>,
}

impl LearnerMatrix {
    pub fn learner_index(&self) -> usize {
        self.learner_index
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Mask as 0.0/1.0, ready for elementwise arithmetic.
    pub fn mask(&self) -> &Array2<f64> {
        &self.mask
    }

    /// Values with missing entries replaced by `fill`.
    pub fn filled(&self, fill: f64) -> Array2<f64> {
        let mut out = self.values.clone();
        out.zip_mut_with(&self.mask, |v, &m| {
            if m == 0.0 {
                *v = fill;
            }
        });
        out
    }
}

/// mask ⊙ observed + (1 − mask) ⊙ generated, selecting (not multiplying)
/// so NaN value slots at missing positions never propagate.
pub fn merge_imputed(observed: &LearnerMatrix, generated: &Array2<f64>) -> Result<Array2<f64>> {
    if observed.values.dim() != generated.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", observed.values.dim()),
            found: format!("{:?}", generated.dim()),
        });
    }
    if generated.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "generated matrix".to_string(),
        });
    }
    let (n, m) = generated.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            out[(i, j)] = if observed.mask[(i, j)] == 1.0 {
                observed.values[(i, j)]
            } else {
                generated[(i, j)]
            };
        }
    }
    Ok(out)
}

/// Dense real-valued tensor of per-cell predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    values: Array3<f64>,
}

impl DenseTensor {
    pub fn new(values: Array3<f64>) -> Self {
        DenseTensor { values }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn get(&self, u: usize, i: usize, m: usize) -> f64 {
        self.values[(u, i, m)]
    }

    /// Clamp every value into [0, 1]. Errors on non-finite input.
    pub fn clamp01(&self) -> Result<DenseTensor> {
        for ((u, i, m), v) in self.values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("dense tensor cell ({u}, {i}, {m})"),
                });
            }
        }
        Ok(DenseTensor {
            values: self.values.map(|v| v.clamp(0.0, 1.0)),
        })
    }
}
