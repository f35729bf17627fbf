//! Interaction-log parsing, synthetic dataset generation and holdout
//! splitting.
//!
//! File format: UTF-8 delimited text (default comma) with header row
//! `learner_id,question_id,attempt,outcome`. Attempts are 1-based in
//! files and 0-based internally.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CellValue, DenseTensor, PerfTensor};

/// One parsed row of an interaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub learner_id: String,
    pub question_id: String,
    /// 1-based attempt index as it appears in files.
    pub attempt: usize,
    pub outcome: u8,
}

/// Delimited-text format descriptor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CsvFormat {
    pub delimiter: char,
}

impl Default for CsvFormat {
    fn default() -> Self {
        CsvFormat { delimiter: ',' }
    }
}

/// Parse an interaction log. The first line is a header and is skipped;
/// errors name the offending 1-based line number.
pub fn parse_records<R: BufRead>(reader: R, format: &CsvFormat) -> Result<Vec<InteractionRecord>> {
    let mut lines = reader.lines();
    match lines.next() {
        Some(h) => {
            h?;
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header row".to_string(),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 columns, found {}", fields.len()),
            });
        }
        let attempt: usize = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("attempt `{}` is not a positive integer", fields[2]),
        })?;
        if attempt == 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "attempt must be >= 1".to_string(),
            });
        }
        let outcome: u8 = match fields[3].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("outcome `{other}` not in {{0, 1}}"),
                })
            }
        };
        out.push(InteractionRecord {
            learner_id: fields[0].trim().to_string(),
            question_id: fields[1].trim().to_string(),
            attempt,
            outcome,
        });
    }
    Ok(out)
}

/// Result of assembling records into a tensor.
#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub tensor: PerfTensor,
    /// Duplicate (learner, question, attempt) rows whose outcome
    /// conflicted with an earlier row; the first row wins.
    pub conflict_count: usize,
}

/// Build a tensor from records. Ids are ordered by first appearance;
/// M is the maximum attempt index seen.
pub fn build_tensor(records: &[InteractionRecord]) -> Result<BuildOutcome> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut learner_ids: Vec<String> = Vec::new();
    let mut question_ids: Vec<String> = Vec::new();
    let mut learner_idx: HashMap<&str, usize> = HashMap::new();
    let mut question_idx: HashMap<&str, usize> = HashMap::new();
    let mut max_attempt = 0usize;
    for r in records {
        if !learner_idx.contains_key(r.learner_id.as_str()) {
            learner_idx.insert(r.learner_id.as_str(), learner_ids.len());
            learner_ids.push(r.learner_id.clone());
        }
        if !question_idx.contains_key(r.question_id.as_str()) {
            question_idx.insert(r.question_id.as_str(), question_ids.len());
            question_ids.push(r.question_id.clone());
        }
        max_attempt = max_attempt.max(r.attempt);
    }
    let (u, n, m) = (learner_ids.len(), question_ids.len(), max_attempt);
    let mut cells = Array3::from_elem((u, n, m), CellValue::Missing);
    let mut conflicts = 0usize;
    for r in records {
        let coord = (
            learner_idx[r.learner_id.as_str()],
            question_idx[r.question_id.as_str()],
            r.attempt - 1,
        );
        let value = CellValue::from_outcome(r.outcome);
        match cells[coord] {
            CellValue::Missing => cells[coord] = value,
            existing if existing == value => {}
            _ => conflicts += 1,
        }
    }
    Ok(BuildOutcome {
        tensor: PerfTensor::new(cells, learner_ids, question_ids)?,
        conflict_count: conflicts,
    })
}

/// Configuration for the synthetic generator.
///
/// The response model is a two-parameter IRT curve with a linear practice
/// term: p(correct) = logistic(theta_u - b_i + gamma_u * m), with
/// attempt-dependent dropout producing the missingness pattern.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub u_count: usize,
    pub n_count: usize,
    pub m_count: usize,
    pub ability_spread: f64,
    pub difficulty_spread: f64,
    pub learning_rate_mean: f64,
    pub base_dropout: f64,
    pub dropout_growth: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            u_count: 100,
            n_count: 10,
            m_count: 5,
            ability_spread: 1.0,
            difficulty_spread: 1.0,
            learning_rate_mean: 0.3,
            base_dropout: 0.2,
            dropout_growth: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.u_count == 0 || self.n_count == 0 || self.m_count == 0 {
            return Err(Error::InvalidConfig("counts must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.base_dropout) {
            return Err(Error::InvalidConfig(
                "base_dropout must be in [0, 1)".to_string(),
            ));
        }
        if self.dropout_growth < 0.0 {
            return Err(Error::InvalidConfig(
                "dropout_growth must be >= 0".to_string(),
            ));
        }
        for f in [
            self.ability_spread,
            self.difficulty_spread,
            self.learning_rate_mean,
        ] {
            if !f.is_finite() {
                return Err(Error::InvalidConfig("non-finite spread".to_string()));
            }
        }
        Ok(())
    }
}

/// A synthetic dataset with its generating ground truth.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub truth_prob: DenseTensor,
    pub truth_binary: PerfTensor,
    pub observed: PerfTensor,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministic per seed. Dropout probability for attempt layer m is
/// min(0.95, base_dropout + dropout_growth * m); the cap keeps late
/// attempt layers from emptying out entirely.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let (u, n, m) = (cfg.u_count, cfg.n_count, cfg.m_count);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let theta: Vec<f64> = (0..u)
        .map(|_| std_normal.sample(&mut rng) * cfg.ability_spread)
        .collect();
    let diff: Vec<f64> = (0..n)
        .map(|_| std_normal.sample(&mut rng) * cfg.difficulty_spread)
        .collect();
    let gamma_std = 0.5 * cfg.learning_rate_mean.abs();
    let gamma: Vec<f64> = (0..u)
        .map(|_| cfg.learning_rate_mean + std_normal.sample(&mut rng) * gamma_std)
        .collect();

    let mut prob = Array3::zeros((u, n, m));
    let mut binary = Array3::from_elem((u, n, m), CellValue::Missing);
    let mut observed = Array3::from_elem((u, n, m), CellValue::Missing);
    for uu in 0..u {
        for i in 0..n {
            for mm in 0..m {
                let p = logistic(theta[uu] - diff[i] + gamma[uu] * mm as f64);
                prob[(uu, i, mm)] = p;
                let outcome = if rng.random::<f64>() < p {
                    CellValue::Correct
                } else {
                    CellValue::Incorrect
                };
                binary[(uu, i, mm)] = outcome;
                let drop_p = (cfg.base_dropout + cfg.dropout_growth * mm as f64).min(0.95);
                if rng.random::<f64>() >= drop_p {
                    observed[(uu, i, mm)] = outcome;
                }
            }
        }
    }
    let learner_ids: Vec<String> = (0..u).map(|k| format!("L{}", k + 1)).collect();
    let question_ids: Vec<String> = (0..n).map(|k| format!("Q{}", k + 1)).collect();
    Ok(SynthDataset {
        truth_prob: DenseTensor::new(prob),
        truth_binary: PerfTensor::new(binary, learner_ids.clone(), question_ids.clone())?,
        observed: PerfTensor::new(observed, learner_ids, question_ids)?,
    })
}

/// Hide a seeded uniform sample of observed cells, returning the reduced
/// tensor and the hidden coordinates.
pub fn holdout_mask(
    t: &PerfTensor,
    fraction: f64,
    seed: u64,
) -> Result<(PerfTensor, Vec<(usize, usize, usize)>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut coords = t.mask().observed_coords();
    let need = (fraction * coords.len() as f64).ceil() as usize;
    if coords.len() < need {
        return Err(Error::TooFewObserved {
            have: coords.len(),
            need,
        });
    }
    let k = (fraction * coords.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    let eval_cells: Vec<_> = coords.into_iter().take(k).collect();
    let train = t.with_cells_hidden(&eval_cells)?;
    Ok((train, eval_cells))
}

/// Write a tensor's observed cells as an interaction log (1-based attempts).
pub fn write_dataset<W: Write>(t: &PerfTensor, w: &mut W, format: &CsvFormat) -> Result<()> {
    let d = format.delimiter;
    writeln!(w, "learner_id{d}question_id{d}attempt{d}outcome")?;
    let (u, n, m) = t.dims();
    for uu in 0..u {
        for i in 0..n {
            for mm in 0..m {
                if let Some(v) = t.get(uu, i, mm).to_f64() {
                    writeln!(
                        w,
                        "{}{d}{}{d}{}{d}{}",
                        t.learner_ids()[uu],
                        t.question_ids()[i],
                        mm + 1,
                        v as u8
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Write a dense tensor cell-per-row: `u,i,m,<column>` with 0-based coords.
pub fn write_dense<W: Write>(t: &DenseTensor, w: &mut W, column: &str) -> Result<()> {
    writeln!(w, "u,i,m,{column}")?;
    let (u, n, m) = t.dims();
    for uu in 0..u {
        for i in 0..n {
            for mm in 0..m {
                writeln!(w, "{uu},{i},{mm},{}", t.get(uu, i, mm))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn parse(text: &str) -> Result<Vec<InteractionRecord>> {
        parse_records(Cursor::new(text), &CsvFormat::default())
    }

    #[test]
    fn parses_single_row() {
        let recs = parse("learner_id,question_id,attempt,outcome\nL1,Q1,1,1\n").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].learner_id, "L1");
        assert_eq!(recs[0].attempt, 1);
        assert_eq!(recs[0].outcome, 1);
    }

    #[test]
    fn bad_outcome_names_line() {
        let err = parse("h,h,h,h\nL1,Q1,1,2\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn empty_after_header_is_empty_list() {
        assert!(parse("learner_id,question_id,attempt,outcome\n").unwrap().is_empty());
    }

    #[test]
    fn missing_header_is_error() {
        assert!(parse("").is_err());
    }

    #[test]
    fn bad_column_count_and_attempt() {
        assert!(parse("h\nL1,Q1,1\n").is_err());
        assert!(parse("h,h,h,h\nL1,Q1,zero,1\n").is_err());
        assert!(parse("h,h,h,h\nL1,Q1,0,1\n").is_err());
    }

    #[test]
    fn build_small_tensor() {
        let recs = parse("h,h,h,h\nL1,Q1,1,1\nL1,Q2,1,0\n").unwrap();
        let out = build_tensor(&recs).unwrap();
        assert_eq!(out.tensor.dims(), (1, 2, 1));
        assert_eq!(out.tensor.sparsity_level(), 0.0);
        assert_eq!(out.conflict_count, 0);
    }

    #[test]
    fn max_attempt_rule_leaves_gaps_missing() {
        let recs = parse("h,h,h,h\nL1,Q1,1,1\nL1,Q1,3,0\n").unwrap();
        let t = build_tensor(&recs).unwrap().tensor;
        assert_eq!(t.dims(), (1, 1, 3));
        assert!(t.get(0, 0, 1).is_missing());
        assert_eq!(t.get(0, 0, 2), CellValue::Incorrect);
    }

    #[test]
    fn duplicate_handling() {
        let recs = parse("h,h,h,h\nL1,Q1,1,1\nL1,Q1,1,1\nL1,Q1,1,0\n").unwrap();
        let out = build_tensor(&recs).unwrap();
        assert_eq!(out.conflict_count, 1);
        assert_eq!(out.tensor.get(0, 0, 0), CellValue::Correct);
    }

    #[test]
    fn empty_records_error() {
        assert!(build_tensor(&[]).is_err());
    }

    #[test]
    fn table1_shaped_input() {
        // CSAL Lesson 1 shape: 118 learners, 9 questions, max attempt 9
        let mut recs = Vec::new();
        for u in 0..118 {
            for q in 0..9 {
                recs.push(InteractionRecord {
                    learner_id: format!("L{u}"),
                    question_id: format!("Q{q}"),
                    attempt: 1 + (u + q) % 9,
                    outcome: ((u + q) % 2) as u8,
                });
            }
        }
        let t = build_tensor(&recs).unwrap().tensor;
        assert_eq!(t.dims(), (118, 9, 9));
    }

    #[test]
    fn synth_deterministic() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.observed, b.observed);
        assert_eq!(a.truth_binary, b.truth_binary);
        assert_eq!(a.truth_prob, b.truth_prob);
    }

    #[test]
    fn synth_monotone_sparsity() {
        let cfg = SynthConfig {
            dropout_growth: 0.15,
            ..SynthConfig::default()
        };
        let d = synth_generate(&cfg).unwrap();
        // brute-force sparsity per truncation must be non-decreasing
        let mut last = 0.0;
        for m in 1..=cfg.m_count {
            let tr = d.observed.truncate_attempts(m).unwrap();
            let (u, n, mm) = tr.dims();
            let mut missing = 0usize;
            for uu in 0..u {
                for i in 0..n {
                    for k in 0..mm {
                        if tr.get(uu, i, k).is_missing() {
                            missing += 1;
                        }
                    }
                }
            }
            let s = missing as f64 / (u * n * mm) as f64;
            assert_eq!(s, tr.sparsity_level());
            assert!(s >= last - 1e-12, "sparsity decreased at m={m}");
            last = s;
        }
    }

    #[test]
    fn synth_dense_when_no_dropout() {
        let cfg = SynthConfig {
            base_dropout: 0.0,
            dropout_growth: 0.0,
            ..SynthConfig::default()
        };
        let d = synth_generate(&cfg).unwrap();
        assert_eq!(d.observed.sparsity_level(), 0.0);
        assert_eq!(d.observed, d.truth_binary);
    }

    #[test]
    fn synth_observed_agrees_with_truth() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        let (u, n, m) = d.observed.dims();
        for uu in 0..u {
            for i in 0..n {
                for mm in 0..m {
                    let o = d.observed.get(uu, i, mm);
                    if !o.is_missing() {
                        assert_eq!(o, d.truth_binary.get(uu, i, mm));
                    }
                }
            }
        }
    }

    #[test]
    fn holdout_partitions_observed() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        let t = &d.observed;
        let observed_before = t.observed_count();
        let (train, eval_cells) = holdout_mask(t, 0.3, 7).unwrap();
        assert_eq!(
            eval_cells.len(),
            (0.3 * observed_before as f64).round() as usize
        );
        for &(u, i, m) in &eval_cells {
            assert!(!t.get(u, i, m).is_missing());
            assert!(train.get(u, i, m).is_missing());
        }
        let (uu, n, m) = t.dims();
        let total = (uu * n * m) as f64;
        let expect = t.sparsity_level() + eval_cells.len() as f64 / total;
        assert!((train.sparsity_level() - expect).abs() < 1e-12);
        // determinism
        let (_, again) = holdout_mask(t, 0.3, 7).unwrap();
        assert_eq!(eval_cells, again);
    }

    #[test]
    fn holdout_rejects_bad_fraction() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        assert!(holdout_mask(&d.observed, 0.0, 1).is_err());
        assert!(holdout_mask(&d.observed, 1.0, 1).is_err());
    }

    #[test]
    fn build_tensor_order_insensitive_up_to_first_appearance() {
        let recs = parse("h,h,h,h\nL1,Q1,1,1\nL1,Q2,2,0\nL2,Q1,1,0\n").unwrap();
        let a = build_tensor(&recs).unwrap().tensor;
        // swap last two rows; first appearances unchanged
        let swapped = vec![recs[0].clone(), recs[2].clone(), recs[1].clone()];
        let b = build_tensor(&swapped).unwrap().tensor;
        assert_eq!(a, b);
    }

    #[test]
    fn dataset_round_trip() {
        let d = synth_generate(&SynthConfig {
            u_count: 5,
            n_count: 3,
            m_count: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_dataset(&d.observed, &mut buf, &CsvFormat::default()).unwrap();
        let recs = parse_records(Cursor::new(buf), &CsvFormat::default()).unwrap();
        let rebuilt = build_tensor(&recs).unwrap().tensor;
        // dims can shrink if trailing attempts are fully missing; values agree
        let (u, n, m) = rebuilt.dims();
        assert_eq!((u, n), (5, 3));
        for uu in 0..u {
            for i in 0..n {
                for mm in 0..m {
                    assert_eq!(rebuilt.get(uu, i, mm), d.observed.get(uu, i, mm));
                }
            }
        }
    }
}
