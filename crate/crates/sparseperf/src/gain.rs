//! Adversarial imputer with a conditional generator and a
//! hint-conditioned discriminator.
//!
//! The generator sees three channels per learner image: observed values
//! with missing cells noise-filled, the mask, and (1 − mask) ⊙ noise.
//! The discriminator sees the merged (imputed) image plus a hint channel
//! and is trained to recover the mask; the generator is trained to fool
//! it on missing cells while fitting observed cells under a least-squares
//! (RMSE) reconstruction term.

use std::io::{BufRead, Write};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{adam_step, load_params, save_params, AdamState, NetSpec, Network};
use crate::tensor::{DenseTensor, PerfTensor};

/// Probabilities are clamped to [EPS, 1 − EPS] before logs.
pub const LOG_EPS: f64 = 1e-7;

/// Below this observed-fit RMSE the reconstruction gradient switches to
/// MSE scaling to stay well defined.
const RMSE_GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct GainConfig {
    pub hint_rate: f64,
    pub noise_scale: f64,
    /// Weight of the observed-cell RMSE term in the generator loss.
    pub recon_weight: f64,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub early_stop_rmse: f64,
    pub d_steps_per_g_step: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GainConfig {
    fn default() -> Self {
        GainConfig {
            hint_rate: 0.9,
            noise_scale: 0.01,
            recon_weight: 10.0,
            learning_rate: 1e-4,
            max_iterations: 100,
            early_stop_rmse: 0.1,
            d_steps_per_g_step: 1,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl GainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hint_rate > 0.0 && self.hint_rate <= 1.0) {
            return Err(Error::InvalidConfig("hint_rate must be in (0, 1]".into()));
        }
        if self.noise_scale <= 0.0 {
            return Err(Error::InvalidConfig("noise_scale must be > 0".into()));
        }
        if self.recon_weight <= 0.0 {
            return Err(Error::InvalidConfig("recon_weight must be > 0".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.max_iterations == 0 || self.d_steps_per_g_step == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "iteration, d-step and batch counts must be positive".into(),
            ));
        }
        if !(self.early_stop_rmse > 0.0) {
            return Err(Error::InvalidConfig("early_stop_rmse must be > 0".into()));
        }
        Ok(())
    }
}

/// Uniform noise on [0, scale], deterministic per seed.
pub fn make_noise(dims: (usize, usize), scale: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn(dims, |_| rng.random::<f64>() * scale)
}

/// Hint matrix: each entry reveals the mask bit with probability
/// `hint_rate`, otherwise 0.5.
pub fn make_hint(mask: &Array2<f64>, hint_rate: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros(mask.dim());
    for (o, &m) in out.iter_mut().zip(mask.iter()) {
        let reveal = rng.random::<f64>() < hint_rate;
        *o = if reveal { m } else { 0.5 };
    }
    out
}

/// Trained imputer: both networks plus the per-iteration observed-fit
/// RMSE curve.
#[derive(Debug, Clone)]
pub struct GainModel {
    pub generator: Network,
    pub discriminator: Network,
    pub config: GainConfig,
    pub training_curve: Vec<(usize, f64)>,
}

/// Negated mask-recovery objective, averaged over all entries:
/// −mean[mask ⊙ log d + (1 − mask) ⊙ log(1 − d)].
pub fn discriminator_loss(d_out: &Array3<f64>, mask: &Array3<f64>) -> f64 {
    let mut acc = 0.0;
    for (&d, &m) in d_out.iter().zip(mask.iter()) {
        let d = d.clamp(LOG_EPS, 1.0 - LOG_EPS);
        acc += m * d.ln() + (1.0 - m) * (1.0 - d).ln();
    }
    -acc / d_out.len() as f64
}

/// Generator objective: −mean over missing entries of log d, plus
/// recon_weight × RMSE over observed entries.
pub fn generator_loss(
    d_out: &Array3<f64>,
    mask: &Array3<f64>,
    generated: &Array3<f64>,
    observed: &Array3<f64>,
    recon_weight: f64,
) -> Result<f64> {
    let mut adv = 0.0;
    let mut n_missing = 0usize;
    let mut sq = 0.0;
    let mut n_obs = 0usize;
    for (((&d, &m), &g), &o) in d_out
        .iter()
        .zip(mask.iter())
        .zip(generated.iter())
        .zip(observed.iter())
    {
        if m == 0.0 {
            adv -= d.clamp(LOG_EPS, 1.0 - LOG_EPS).ln();
            n_missing += 1;
        } else {
            let e = g - o;
            sq += e * e;
            n_obs += 1;
        }
    }
    if n_obs == 0 {
        return Err(Error::EmptyBatch { batch: 0 });
    }
    let adv_term = if n_missing > 0 {
        adv / n_missing as f64
    } else {
        0.0
    };
    Ok(adv_term + recon_weight * (sq / n_obs as f64).sqrt())
}

/// Per-batch working buffers for one training step.
struct Batch {
    /// B × N × M observed values, 0.0 at missing slots (mask gates them).
    observed: Array3<f64>,
    /// B × N × M mask as 0/1 reals.
    mask: Array3<f64>,
    learners: Vec<usize>,
}

fn collect_batches(t: &PerfTensor, batch_size: usize) -> Result<Vec<Batch>> {
    let (u, n, m) = t.dims();
    let size = batch_size.min(u);
    let mut batches = Vec::new();
    let ids: Vec<usize> = (0..u).collect();
    for chunk in ids.chunks(size) {
        let b = chunk.len();
        let mut observed = Array3::zeros((b, n, m));
        let mut mask = Array3::zeros((b, n, m));
        for (bi, &uu) in chunk.iter().enumerate() {
            let s = t.slice_learner(uu)?;
            for i in 0..n {
                for mm in 0..m {
                    if s.mask()[(i, mm)] == 1.0 {
                        observed[(bi, i, mm)] = s.values()[(i, mm)];
                        mask[(bi, i, mm)] = 1.0;
                    }
                }
            }
        }
        batches.push(Batch {
            observed,
            mask,
            learners: chunk.to_vec(),
        });
    }
    Ok(batches)
}

fn batch_noise(dims: (usize, usize, usize), scale: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn(dims, |_| rng.random::<f64>() * scale)
}

fn batch_hint(mask: &Array3<f64>, hint_rate: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut out = Array3::zeros(mask.dim());
    for (o, &m) in out.iter_mut().zip(mask.iter()) {
        *o = if rng.random::<f64>() < hint_rate {
            m
        } else {
            0.5
        };
    }
    out
}

/// Generator input channels: noise-filled data, mask, (1 − mask) ⊙ noise.
fn generator_input(batch: &Batch, noise: &Array3<f64>) -> Array4<f64> {
    let (b, n, m) = batch.mask.dim();
    let mut input = Array4::zeros((b, 3, n, m));
    for bi in 0..b {
        for i in 0..n {
            for mm in 0..m {
                let msk = batch.mask[(bi, i, mm)];
                let z = noise[(bi, i, mm)];
                let x = if msk == 1.0 {
                    batch.observed[(bi, i, mm)]
                } else {
                    z
                };
                input[(bi, 0, i, mm)] = x;
                input[(bi, 1, i, mm)] = msk;
                input[(bi, 2, i, mm)] = (1.0 - msk) * z;
            }
        }
    }
    input
}

fn merge_batch(batch: &Batch, generated: &Array3<f64>) -> Array3<f64> {
    let mut out = generated.clone();
    for ((idx, o), &m) in out.indexed_iter_mut().zip(batch.mask.iter()) {
        if m == 1.0 {
            *o = batch.observed[idx];
        }
    }
    out
}

fn discriminator_input(imputed: &Array3<f64>, hint: &Array3<f64>) -> Array4<f64> {
    let (b, n, m) = imputed.dim();
    let mut input = Array4::zeros((b, 2, n, m));
    for bi in 0..b {
        for i in 0..n {
            for mm in 0..m {
                input[(bi, 0, i, mm)] = imputed[(bi, i, mm)];
                input[(bi, 1, i, mm)] = hint[(bi, i, mm)];
            }
        }
    }
    input
}

/// Observed-reconstruction RMSE of the generator over all learners, in
/// infer mode with fresh seeded noise.
fn observed_rmse(generator: &Network, batches: &[Batch], cfg: &GainConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sq = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let noise = batch_noise(batch.mask.dim(), cfg.noise_scale, &mut rng);
        let input = generator_input(batch, &noise);
        let (gen, _) = generator.forward_infer(&input)?;
        for ((&g, &o), &m) in gen.iter().zip(batch.observed.iter()).zip(batch.mask.iter()) {
            if m == 1.0 {
                let e = g - o;
                sq += e * e;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::TooFewObserved { have: 0, need: 1 });
    }
    Ok((sq / count as f64).sqrt())
}

/// Gradient of the generator loss with respect to the generator output.
fn generator_output_grad(
    d_out: &Array3<f64>,
    d_input_grad_ch0: &Array3<f64>,
    batch: &Batch,
    generated: &Array3<f64>,
    recon_weight: f64,
) -> Array3<f64> {
    let n_missing = batch.mask.iter().filter(|&&m| m == 0.0).count();
    let mut n_obs = 0usize;
    let mut sq = 0.0;
    for ((&g, &o), &m) in generated
        .iter()
        .zip(batch.observed.iter())
        .zip(batch.mask.iter())
    {
        if m == 1.0 {
            let e = g - o;
            sq += e * e;
            n_obs += 1;
        }
    }
    let rmse = (sq / n_obs as f64).sqrt();
    let mut grad = Array3::zeros(generated.dim());
    for (idx, g) in grad.indexed_iter_mut() {
        let m = batch.mask[idx];
        if m == 0.0 {
            if n_missing > 0 {
                // adversarial path flows through the merged image into D;
                // d imputed / d gen = 1 at missing cells
                *g += d_input_grad_ch0[idx];
                let _ = d_out; // d_out enters via the upstream grad fed to D
            }
        } else {
            let e = generated[idx] - batch.observed[idx];
            *g += if rmse < RMSE_GRAD_FLOOR {
                recon_weight * 2.0 * e / n_obs as f64
            } else {
                recon_weight * e / (n_obs as f64 * rmse)
            };
        }
    }
    grad
}

/// Train on all learner images of `t`. Deterministic per config seed.
pub fn train(t: &PerfTensor, cfg: &GainConfig) -> Result<GainModel> {
    cfg.validate()?;
    let (_, n, m) = t.dims();
    let batches = collect_batches(t, cfg.batch_size)?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g_seed = master.random::<u64>();
    let d_seed = master.random::<u64>();
    let mut generator = Network::new(NetSpec::imputer(3, (n, m)), g_seed)?;
    let mut discriminator = Network::new(NetSpec::imputer(2, (n, m)), d_seed)?;
    let mut g_adam = AdamState::new(&generator.params, cfg.learning_rate);
    let mut d_adam = AdamState::new(&discriminator.params, cfg.learning_rate);
    let mut curve = Vec::new();

    for iter in 1..=cfg.max_iterations {
        for (batch_idx, batch) in batches.iter().enumerate() {
            let dims = batch.mask.dim();
            if batch.mask.iter().all(|&m| m == 0.0) {
                // no observed entries to anchor the reconstruction term
                continue;
            }

            // discriminator updates
            for _ in 0..cfg.d_steps_per_g_step {
                let noise = batch_noise(dims, cfg.noise_scale, &mut master);
                let g_in = generator_input(batch, &noise);
                let (gen, _) = generator.forward_infer(&g_in)?;
                let imputed = merge_batch(batch, &gen);
                let hint = batch_hint(&batch.mask, cfg.hint_rate, &mut master);
                let d_in = discriminator_input(&imputed, &hint);
                let (d_out, d_tape) = discriminator.forward_train(&d_in, &mut master)?;
                let loss = discriminator_loss(&d_out, &batch.mask);
                if !loss.is_finite() {
                    return Err(Error::Divergence { iteration: iter });
                }
                let total = d_out.len() as f64;
                let mut d_grad = Array3::zeros(d_out.dim());
                for (idx, g) in d_grad.indexed_iter_mut() {
                    let d = d_out[idx].clamp(LOG_EPS, 1.0 - LOG_EPS);
                    let m = batch.mask[idx];
                    *g = -(m / d - (1.0 - m) / (1.0 - d)) / total;
                }
                let (grads, _) = discriminator.backward(&d_tape, &d_grad)?;
                adam_step(&mut discriminator.params, &grads, &mut d_adam)?;
            }

            // generator update
            let noise = batch_noise(dims, cfg.noise_scale, &mut master);
            let g_in = generator_input(batch, &noise);
            let (gen, g_tape) = generator.forward_train(&g_in, &mut master)?;
            let imputed = merge_batch(batch, &gen);
            let hint = batch_hint(&batch.mask, cfg.hint_rate, &mut master);
            let d_in = discriminator_input(&imputed, &hint);
            let (d_out, d_tape) = discriminator.forward_infer(&d_in)?;
            let loss = match generator_loss(&d_out, &batch.mask, &gen, &batch.observed, cfg.recon_weight)
            {
                Ok(l) => l,
                Err(Error::EmptyBatch { .. }) => {
                    return Err(Error::EmptyBatch { batch: batch_idx })
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: iter });
            }
            let n_missing = batch.mask.iter().filter(|&&mv| mv == 0.0).count();
            let mut adv_grad = Array3::zeros(d_out.dim());
            if n_missing > 0 {
                for (idx, g) in adv_grad.indexed_iter_mut() {
                    if batch.mask[idx] == 0.0 {
                        let d = d_out[idx].clamp(LOG_EPS, 1.0 - LOG_EPS);
                        *g = -1.0 / (d * n_missing as f64);
                    }
                }
            }
            let (_, d_input_grad) = discriminator.backward(&d_tape, &adv_grad)?;
            let ch0 = d_input_grad.index_axis(Axis(1), 0).to_owned();
            let g_out_grad =
                generator_output_grad(&d_out, &ch0, batch, &gen, cfg.recon_weight);
            let (g_grads, _) = generator.backward(&g_tape, &g_out_grad)?;
            adam_step(&mut generator.params, &g_grads, &mut g_adam)?;
        }

        let rmse_seed = master.random::<u64>();
        let rmse = observed_rmse(&generator, &batches, cfg, rmse_seed)?;
        curve.push((iter, rmse));
        if rmse <= cfg.early_stop_rmse {
            break;
        }
    }

    Ok(GainModel {
        generator,
        discriminator,
        config: *cfg,
        training_curve: curve,
    })
}

/// Impute every cell of `t`: observed cells verbatim, missing cells from
/// the generator (infer mode, fresh seeded noise).
pub fn impute(model: &GainModel, t: &PerfTensor) -> Result<DenseTensor> {
    let (u, n, m) = t.dims();
    let (sn, sm) = model.generator.spec.output_shape;
    if (n, m) != (sn, sm) {
        return Err(Error::ShapeMismatch {
            expected: format!("(_, {sn}, {sm})"),
            found: format!("(_, {n}, {m})"),
        });
    }
    let batches = collect_batches(t, model.config.batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut out = Array3::zeros((u, n, m));
    for batch in &batches {
        let noise = batch_noise(batch.mask.dim(), model.config.noise_scale, &mut rng);
        let input = generator_input(batch, &noise);
        let (gen, _) = model.generator.forward_infer(&input)?;
        for (bi, &uu) in batch.learners.iter().enumerate() {
            for i in 0..n {
                for mm in 0..m {
                    out[(uu, i, mm)] = match t.get(uu, i, mm).to_f64() {
                        Some(v) => v,
                        None => gen[(bi, i, mm)],
                    };
                }
            }
        }
    }
    DenseTensor::new(out).clamp01()
}

/// Export the training curve as `iteration,rmse` CSV.
pub fn write_curve<W: Write>(curve: &[(usize, f64)], w: &mut W) -> Result<()> {
    writeln!(w, "iteration,rmse")?;
    for (it, rmse) in curve {
        writeln!(w, "{it},{rmse}")?;
    }
    Ok(())
}

/// Checkpoint: config block plus both parameter containers, round-trip
/// exact.
pub fn save_model<W: Write>(model: &GainModel, w: &mut W) -> Result<()> {
    writeln!(w, "sparseperf-gain v1")?;
    let cfg = toml_like(&model.config);
    writeln!(w, "config {}", cfg)?;
    let (n, m) = model.generator.spec.output_shape;
    writeln!(w, "shape {n} {m}")?;
    writeln!(w, "generator")?;
    save_params(&model.generator.params, w)?;
    writeln!(w, "discriminator")?;
    save_params(&model.discriminator.params, w)?;
    Ok(())
}

fn toml_like(cfg: &GainConfig) -> String {
    format!(
        "hint_rate={} noise_scale={} recon_weight={} learning_rate={} max_iterations={} early_stop_rmse={} d_steps_per_g_step={} batch_size={} seed={}",
        cfg.hint_rate,
        cfg.noise_scale,
        cfg.recon_weight,
        cfg.learning_rate,
        cfg.max_iterations,
        cfg.early_stop_rmse,
        cfg.d_steps_per_g_step,
        cfg.batch_size,
        cfg.seed
    )
}

fn parse_config(line: &str) -> Result<GainConfig> {
    let mut cfg = GainConfig::default();
    for pair in line.split_whitespace() {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("bad config pair `{pair}`")))?;
        let fv = || {
            v.parse::<f64>()
                .map_err(|_| Error::Checkpoint(format!("bad value `{v}`")))
        };
        let uv = || {
            v.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad value `{v}`")))
        };
        match k {
            "hint_rate" => cfg.hint_rate = fv()?,
            "noise_scale" => cfg.noise_scale = fv()?,
            "recon_weight" => cfg.recon_weight = fv()?,
            "learning_rate" => cfg.learning_rate = fv()?,
            "max_iterations" => cfg.max_iterations = uv()?,
            "early_stop_rmse" => cfg.early_stop_rmse = fv()?,
            "d_steps_per_g_step" => cfg.d_steps_per_g_step = uv()?,
            "batch_size" => cfg.batch_size = uv()?,
            "seed" => {
                cfg.seed = v
                    .parse::<u64>()
                    .map_err(|_| Error::Checkpoint(format!("bad value `{v}`")))?
            }
            other => return Err(Error::Checkpoint(format!("unknown config key `{other}`"))),
        }
    }
    Ok(cfg)
}

/// Load a checkpoint written by [`save_model`]. The training curve is
/// not persisted.
pub fn load_model<R: BufRead>(mut r: R) -> Result<GainModel> {
    let mut line = String::new();
    let mut read_line = |r: &mut R| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Checkpoint("truncated model file".into()));
        }
        Ok(line.trim_end().to_string())
    };
    if read_line(&mut r)? != "sparseperf-gain v1" {
        return Err(Error::Checkpoint("bad model magic".into()));
    }
    let cfg_line = read_line(&mut r)?;
    let cfg = parse_config(
        cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| Error::Checkpoint("missing config line".into()))?,
    )?;
    let shape_line = read_line(&mut r)?;
    let dims: Vec<usize> = shape_line
        .strip_prefix("shape ")
        .ok_or_else(|| Error::Checkpoint("missing shape line".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Checkpoint("bad shape".into())))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::Checkpoint("shape must have two dims".into()));
    }
    let shape = (dims[0], dims[1]);
    if read_line(&mut r)? != "generator" {
        return Err(Error::Checkpoint("missing generator section".into()));
    }
    let g_params = load_params(&mut r)?;
    if read_line(&mut r)? != "discriminator" {
        return Err(Error::Checkpoint("missing discriminator section".into()));
    }
    let d_params = load_params(&mut r)?;
    Ok(GainModel {
        generator: Network {
            spec: NetSpec::imputer(3, shape),
            params: g_params,
        },
        discriminator: Network {
            spec: NetSpec::imputer(2, shape),
            params: d_params,
        },
        config: cfg,
        training_curve: Vec::new(),
    })
}
