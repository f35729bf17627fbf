//! Minimal convolutional network kernel with exact tape-based gradients.
//!
//! The layer sequence is fixed per [`NetSpec`]: each layer is a
//! same-padding stride-1 convolution, optionally followed by batch
//! normalization, an activation and dropout. Gradients are reverse
//! accumulated from the recorded tape and are exact for the recorded
//! computation, which the finite-difference test suite relies on.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_params, save_params};

use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

/// One convolutional layer: same-spatial padding, stride 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub activation: Activation,
    pub use_batchnorm: bool,
    pub dropout_rate: f64,
}

/// Full network: five hidden conv layers by default, then a 1×1 conv +
/// sigmoid output producing a single-channel map of `output_shape`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_channels: usize,
    pub hidden: Vec<ConvLayerSpec>,
    pub output: ConvLayerSpec,
    pub output_shape: (usize, usize),
}

impl NetSpec {
    /// Default imputer topology: channel plan in→16→32→32→16→1 over five
    /// hidden 3×3 relu layers with batch norm and light dropout, then a
    /// 1×1 sigmoid output layer.
    pub fn imputer(input_channels: usize, output_shape: (usize, usize)) -> NetSpec {
        let plan = [16usize, 32, 32, 16, 1];
        let mut hidden = Vec::with_capacity(plan.len());
        let mut prev = input_channels;
        for &out in &plan {
            hidden.push(ConvLayerSpec {
                in_channels: prev,
                out_channels: out,
                kernel: (3, 3),
                activation: Activation::Relu,
                use_batchnorm: true,
                dropout_rate: 0.1,
            });
            prev = out;
        }
        NetSpec {
            input_channels,
            hidden,
            output: ConvLayerSpec {
                in_channels: prev,
                out_channels: 1,
                kernel: (1, 1),
                activation: Activation::Sigmoid,
                use_batchnorm: false,
                dropout_rate: 0.0,
            },
            output_shape,
        }
    }

    pub fn layer_specs(&self) -> Vec<&ConvLayerSpec> {
        let mut v: Vec<&ConvLayerSpec> = self.hidden.iter().collect();
        v.push(&self.output);
        v
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = self.input_channels;
        for (idx, l) in self.layer_specs().into_iter().enumerate() {
            if l.in_channels != prev {
                return Err(Error::InvalidConfig(format!(
                    "layer {idx}: in_channels {} != previous out_channels {prev}",
                    l.in_channels
                )));
            }
            if l.out_channels == 0 || l.kernel.0 == 0 || l.kernel.1 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "layer {idx}: zero-sized kernel or channels"
                )));
            }
            if !(0.0..1.0).contains(&l.dropout_rate) {
                return Err(Error::InvalidConfig(format!(
                    "layer {idx}: dropout rate must be in [0, 1)"
                )));
            }
            prev = l.out_channels;
        }
        if prev != 1 {
            return Err(Error::InvalidConfig(
                "final layer must output a single channel".to_string(),
            ));
        }
        Ok(())
    }
}

/// Batch-norm parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// out_channels × in_channels × kh × kw
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub bn: Option<BnParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layers: Vec<LayerParams>,
}

/// Seeded init: weights ~ N(0, 1/fan_in) with fan_in = in·kh·kw, biases
/// zero, batch-norm scale 1 / shift 0.
pub fn init_params(spec: &NetSpec, seed: u64) -> Result<NetParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for l in spec.layer_specs() {
        let fan_in = (l.in_channels * l.kernel.0 * l.kernel.1) as f64;
        let dist = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("valid normal");
        let mut weight = Array4::zeros((l.out_channels, l.in_channels, l.kernel.0, l.kernel.1));
        for w in weight.iter_mut() {
            *w = dist.sample(&mut rng);
        }
        let bn = l.use_batchnorm.then(|| BnParams {
            gamma: Array1::ones(l.out_channels),
            beta: Array1::zeros(l.out_channels),
            running_mean: Array1::zeros(l.out_channels),
            running_var: Array1::ones(l.out_channels),
        });
        layers.push(LayerParams {
            weight,
            bias: Array1::zeros(l.out_channels),
            bn,
        });
    }
    Ok(NetParams { layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

struct BnCache {
    mean: Array1<f64>,
    var: Array1<f64>,
    x_hat: Array4<f64>,
}

struct LayerCache {
    input: Array4<f64>,
    bn: Option<BnCache>,
    pre_act: Array4<f64>,
    act_out: Array4<f64>,
    /// Scaled keep mask {0, 1/(1-p)}; None outside train mode.
    dropout_mask: Option<Array4<f64>>,
}

/// Activation record from one forward pass.
pub struct Tape {
    mode: Mode,
    caches: Vec<LayerCache>,
    output_dim: (usize, usize, usize),
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Per-layer parameter gradients, shapes mirroring [`NetParams`]
/// (running statistics carry no gradient).
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

/// A spec plus its parameters.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetSpec,
    pub params: NetParams,
}

impl Network {
    pub fn new(spec: NetSpec, seed: u64) -> Result<Network> {
        let params = init_params(&spec, seed)?;
        Ok(Network { spec, params })
    }

    fn check_input(&self, input: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = input.dim();
        let (n, m) = self.spec.output_shape;
        if c != self.spec.input_channels || h != n || w != m {
            return Err(Error::ShapeMismatch {
                expected: format!("(_, {}, {}, {})", self.spec.input_channels, n, m),
                found: format!("{:?}", input.dim()),
            });
        }
        Ok(())
    }

    /// Train-mode forward: batch statistics, active dropout, running-stat
    /// update. The tape suffices for exact gradients.
    pub fn forward_train(
        &mut self,
        input: &Array4<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array3<f64>, Tape)> {
        self.check_input(input)?;
        let (out, tape, stat_updates) = self.run_forward(input, Mode::Train, Some(rng))?;
        for (li, update) in stat_updates.into_iter().enumerate() {
            if let (Some((mean, var)), Some(bn)) = (update, self.params.layers[li].bn.as_mut()) {
                for ch in 0..mean.len() {
                    bn.running_mean[ch] =
                        (1.0 - BN_MOMENTUM) * bn.running_mean[ch] + BN_MOMENTUM * mean[ch];
                    bn.running_var[ch] =
                        (1.0 - BN_MOMENTUM) * bn.running_var[ch] + BN_MOMENTUM * var[ch];
                }
            }
        }
        Ok((out, tape))
    }

    /// Infer-mode forward: running statistics, no dropout, no mutation.
    pub fn forward_infer(&self, input: &Array4<f64>) -> Result<(Array3<f64>, Tape)> {
        self.check_input(input)?;
        let (out, tape, _) = self.run_forward(input, Mode::Infer, None)?;
        Ok((out, tape))
    }

    #[allow(clippy::type_complexity)]
    fn run_forward(
        &self,
        input: &Array4<f64>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array3<f64>, Tape, Vec<Option<(Array1<f64>, Array1<f64>)>>)> {
        let specs: Vec<ConvLayerSpec> = self.spec.layer_specs().into_iter().cloned().collect();
        let mut caches = Vec::with_capacity(specs.len());
        let mut stat_updates = Vec::with_capacity(specs.len());
        let mut x = input.clone();
        for (li, lspec) in specs.iter().enumerate() {
            let params = &self.params.layers[li];
            let z = conv_forward(&x, &params.weight, &params.bias);
            let (bn_out, bn_cache) = match (&params.bn, mode) {
                (Some(bn), Mode::Train) => {
                    let (y, cache) = bn_forward_train(&z, bn);
                    stat_updates.push(Some((cache.mean.clone(), cache.var.clone())));
                    (y, Some(cache))
                }
                (Some(bn), Mode::Infer) => {
                    let (y, cache) = bn_forward_infer(&z, bn);
                    stat_updates.push(None);
                    (y, Some(cache))
                }
                (None, _) => {
                    stat_updates.push(None);
                    (z, None)
                }
            };
            let act_out = match lspec.activation {
                Activation::Relu => bn_out.map(|v| v.max(0.0)),
                Activation::Sigmoid => bn_out.map(|v| 1.0 / (1.0 + (-v).exp())),
                Activation::None => bn_out.clone(),
            };
            let (dropped, dropout_mask) = if mode == Mode::Train && lspec.dropout_rate > 0.0 {
                let rng = rng.as_deref_mut().expect("train mode carries an rng");
                let keep = 1.0 / (1.0 - lspec.dropout_rate);
                let mut mask = Array4::zeros(act_out.dim());
                for mv in mask.iter_mut() {
                    *mv = if rng.random::<f64>() < lspec.dropout_rate {
                        0.0
                    } else {
                        keep
                    };
                }
                (&act_out * &mask, Some(mask))
            } else {
                (act_out.clone(), None)
            };
            if dropped.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: li });
            }
            caches.push(LayerCache {
                input: x,
                bn: bn_cache,
                pre_act: bn_out,
                act_out,
                dropout_mask,
            });
            x = dropped;
        }
        let (b, c, h, w) = x.dim();
        debug_assert_eq!(c, 1);
        let out = x.into_shape_with_order((b, h, w)).expect("single channel");
        Ok((
            out,
            Tape {
                mode,
                caches,
                output_dim: (b, h, w),
            },
            stat_updates,
        ))
    }

    /// Reverse accumulation from the tape. Returns parameter gradients and
    /// the gradient with respect to the network input.
    pub fn backward(&self, tape: &Tape, loss_grad: &Array3<f64>) -> Result<(NetGrads, Array4<f64>)> {
        if loss_grad.dim() != tape.output_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", tape.output_dim),
                found: format!("{:?}", loss_grad.dim()),
            });
        }
        let (b, h, w) = loss_grad.dim();
        let mut g = loss_grad
            .clone()
            .into_shape_with_order((b, 1, h, w))
            .expect("channel expand");
        let mut rev_grads: Vec<LayerGrads> = Vec::with_capacity(tape.caches.len());
        for (li, cache) in tape.caches.iter().enumerate().rev() {
            let params = &self.params.layers[li];
            if let Some(mask) = &cache.dropout_mask {
                g = &g * mask;
            }
            let lspec_act = {
                let specs = self.spec.layer_specs();
                specs[li].activation
            };
            g = match lspec_act {
                Activation::Relu => {
                    let mut dg = g;
                    dg.zip_mut_with(&cache.pre_act, |d, &p| {
                        if p <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    dg
                }
                Activation::Sigmoid => {
                    let mut dg = g;
                    dg.zip_mut_with(&cache.act_out, |d, &s| *d *= s * (1.0 - s));
                    dg
                }
                Activation::None => g,
            };
            let (dz, dgamma, dbeta) = match (&cache.bn, &params.bn) {
                (Some(bn_cache), Some(bn)) => {
                    let (dz, dgm, dbt) = match tape.mode {
                        Mode::Train => bn_backward_train(bn_cache, &bn.gamma, &g),
                        Mode::Infer => bn_backward_infer(bn_cache, &bn.gamma, &g),
                    };
                    (dz, Some(dgm), Some(dbt))
                }
                _ => (g, None, None),
            };
            let (dw, db, dx) = conv_backward(&cache.input, &params.weight, &dz);
            rev_grads.push(LayerGrads {
                weight: dw,
                bias: db,
                gamma: dgamma,
                beta: dbeta,
            });
            g = dx;
        }
        rev_grads.reverse();
        Ok((NetGrads { layers: rev_grads }, g))
    }
}

/// Same-padding stride-1 convolution. Even kernels pad one more cell on
/// the trailing side.
pub fn conv_forward(input: &Array4<f64>, weight: &Array4<f64>, bias: &Array1<f64>) -> Array4<f64> {
    let (b, cin, h, w) = input.dim();
    let (cout, cin_w, kh, kw) = weight.dim();
    debug_assert_eq!(cin, cin_w);
    let (hp, wp) = (h + kh - 1, w + kw - 1);
    let (ph0, pw0) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut padded = Array4::zeros((b, cin, hp, wp));
    for bi in 0..b {
        for c in 0..cin {
            for y in 0..h {
                for x in 0..w {
                    padded[(bi, c, y + ph0, x + pw0)] = input[(bi, c, y, x)];
                }
            }
        }
    }
    let patches = im2col(&padded, (kh, kw), (h, w));
    let wmat = weight
        .view()
        .into_shape_with_order((cout, cin_w * kh * kw))
        .expect("contiguous weight");
    // (cout, cin·kh·kw) × (cin·kh·kw, b·h·w)
    let prod = wmat.dot(&patches);
    let mut out = Array4::zeros((b, cout, h, w));
    for bi in 0..b {
        for o in 0..cout {
            let bv = bias[o];
            for y in 0..h {
                for x in 0..w {
                    out[(bi, o, y, x)] = prod[(o, (bi * h + y) * w + x)] + bv;
                }
            }
        }
    }
    out
}

/// Patch matrix of a padded batch: rows index (c, i, j) kernel taps,
/// columns index (b, y, x) output positions.
fn im2col(
    padded: &Array4<f64>,
    (kh, kw): (usize, usize),
    (h, w): (usize, usize),
) -> ndarray::Array2<f64> {
    let (b, cin, hp, wp) = padded.dim();
    let pad = padded.as_slice().expect("standard layout");
    let mut patches = ndarray::Array2::zeros((cin * kh * kw, b * h * w));
    {
        let psl = patches.as_slice_mut().expect("standard layout");
        let cols = b * h * w;
        for c in 0..cin {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kh + i) * kw + j) * cols;
                    for bi in 0..b {
                        let ibase = (bi * cin + c) * hp * wp;
                        for y in 0..h {
                            let src = ibase + (y + i) * wp + j;
                            let dst = row + (bi * h + y) * w;
                            psl[dst..dst + w].copy_from_slice(&pad[src..src + w]);
                        }
                    }
                }
            }
        }
    }
    patches
}

/// Gradients of the same-padding convolution: (d_weight, d_bias, d_input).
pub fn conv_backward(
    input: &Array4<f64>,
    weight: &Array4<f64>,
    d_out: &Array4<f64>,
) -> (Array4<f64>, Array1<f64>, Array4<f64>) {
    let (b, cin, h, w) = input.dim();
    let (cout, _, kh, kw) = weight.dim();
    let (hp, wp) = (h + kh - 1, w + kw - 1);
    let (ph0, pw0) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut padded = Array4::zeros((b, cin, hp, wp));
    for bi in 0..b {
        for c in 0..cin {
            for y in 0..h {
                for x in 0..w {
                    padded[(bi, c, y + ph0, x + pw0)] = input[(bi, c, y, x)];
                }
            }
        }
    }
    let patches = im2col(&padded, (kh, kw), (h, w));

    // Reorder the upstream gradient to (cout, b·h·w) to match the patch
    // matrix column layout.
    let mut d_out_m = ndarray::Array2::zeros((cout, b * h * w));
    for bi in 0..b {
        for o in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    d_out_m[(o, (bi * h + y) * w + x)] = d_out[(bi, o, y, x)];
                }
            }
        }
    }

    let dw_mat = d_out_m.dot(&patches.t());
    let d_weight = dw_mat
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("contiguous gradient");
    let mut d_bias = Array1::zeros(cout);
    for o in 0..cout {
        d_bias[o] = d_out_m.row(o).sum();
    }

    let wmat = weight
        .view()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("contiguous weight");
    let d_patches = wmat.t().dot(&d_out_m);
    // col2im: scatter-add patch gradients back onto the padded grid.
    let mut d_padded = Array4::zeros((b, cin, hp, wp));
    {
        let dpsl = d_padded.as_slice_mut().expect("standard layout");
        let gsl = d_patches.as_slice().expect("standard layout");
        let cols = b * h * w;
        for c in 0..cin {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((c * kh + i) * kw + j) * cols;
                    for bi in 0..b {
                        let ibase = (bi * cin + c) * hp * wp;
                        for y in 0..h {
                            let dst = ibase + (y + i) * wp + j;
                            let src = row + (bi * h + y) * w;
                            for x in 0..w {
                                dpsl[dst + x] += gsl[src + x];
                            }
                        }
                    }
                }
            }
        }
    }
    let mut d_input = Array4::zeros((b, cin, h, w));
    for bi in 0..b {
        for c in 0..cin {
            for y in 0..h {
                for x in 0..w {
                    d_input[(bi, c, y, x)] = d_padded[(bi, c, y + ph0, x + pw0)];
                }
            }
        }
    }
    (d_weight, d_bias, d_input)
}

fn bn_forward_train(x: &Array4<f64>, bn: &BnParams) -> (Array4<f64>, BnCache) {
    let (b, c, h, w) = x.dim();
    let n = (b * h * w) as f64;
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    s += x[(bi, ch, y, xx)];
                }
            }
        }
        mean[ch] = s / n;
        let mut v = 0.0;
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let d = x[(bi, ch, y, xx)] - mean[ch];
                    v += d * d;
                }
            }
        }
        var[ch] = v / n;
    }
    let mut x_hat = Array4::zeros(x.dim());
    let mut y_out = Array4::zeros(x.dim());
    for ch in 0..c {
        let inv_std = 1.0 / (var[ch] + BN_EPS).sqrt();
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let xh = (x[(bi, ch, y, xx)] - mean[ch]) * inv_std;
                    x_hat[(bi, ch, y, xx)] = xh;
                    y_out[(bi, ch, y, xx)] = bn.gamma[ch] * xh + bn.beta[ch];
                }
            }
        }
    }
    (y_out, BnCache { mean, var, x_hat })
}

fn bn_forward_infer(x: &Array4<f64>, bn: &BnParams) -> (Array4<f64>, BnCache) {
    let (b, c, h, w) = x.dim();
    let mut x_hat = Array4::zeros(x.dim());
    let mut y_out = Array4::zeros(x.dim());
    for ch in 0..c {
        let inv_std = 1.0 / (bn.running_var[ch] + BN_EPS).sqrt();
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let xh = (x[(bi, ch, y, xx)] - bn.running_mean[ch]) * inv_std;
                    x_hat[(bi, ch, y, xx)] = xh;
                    y_out[(bi, ch, y, xx)] = bn.gamma[ch] * xh + bn.beta[ch];
                }
            }
        }
    }
    (
        y_out,
        BnCache {
            mean: bn.running_mean.clone(),
            var: bn.running_var.clone(),
            x_hat,
        },
    )
}

fn bn_backward_train(
    cache: &BnCache,
    gamma: &Array1<f64>,
    dy: &Array4<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (b, c, h, w) = dy.dim();
    let n = (b * h * w) as f64;
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ch in 0..c {
        let mut dg = 0.0;
        let mut db = 0.0;
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    dg += dy[(bi, ch, y, xx)] * cache.x_hat[(bi, ch, y, xx)];
                    db += dy[(bi, ch, y, xx)];
                }
            }
        }
        dgamma[ch] = dg;
        dbeta[ch] = db;
    }
    let mut dx = Array4::zeros(dy.dim());
    for ch in 0..c {
        let inv_std = 1.0 / (cache.var[ch] + BN_EPS).sqrt();
        let scale = gamma[ch] * inv_std;
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    dx[(bi, ch, y, xx)] = scale
                        * (dy[(bi, ch, y, xx)]
                            - dbeta[ch] / n
                            - cache.x_hat[(bi, ch, y, xx)] * dgamma[ch] / n);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn bn_backward_infer(
    cache: &BnCache,
    gamma: &Array1<f64>,
    dy: &Array4<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (b, c, h, w) = dy.dim();
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    let mut dx = Array4::zeros(dy.dim());
    for ch in 0..c {
        let inv_std = 1.0 / (cache.var[ch] + BN_EPS).sqrt();
        let scale = gamma[ch] * inv_std;
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let d = dy[(bi, ch, y, xx)];
                    dgamma[ch] += d * cache.x_hat[(bi, ch, y, xx)];
                    dbeta[ch] += d;
                    dx[(bi, ch, y, xx)] = scale * d;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
