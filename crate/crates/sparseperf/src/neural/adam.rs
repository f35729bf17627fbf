//! Adam optimizer with bias correction.

use ndarray::{Array1, Array4};

use super::{NetGrads, NetParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct LayerMoments {
    weight: Array4<f64>,
    bias: Array1<f64>,
    gamma: Option<Array1<f64>>,
    beta: Option<Array1<f64>>,
}

/// Optimizer state: step counter and first/second moment accumulators
/// mirroring the trainable parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<LayerMoments>,
    v: Vec<LayerMoments>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(params: &NetParams, learning_rate: f64) -> AdamState {
        let zeros = |p: &NetParams| {
            p.layers
                .iter()
                .map(|l| LayerMoments {
                    weight: Array4::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                    gamma: l.bn.as_ref().map(|bn| Array1::zeros(bn.gamma.len())),
                    beta: l.bn.as_ref().map(|bn| Array1::zeros(bn.beta.len())),
                })
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(params),
            v: zeros(params),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

struct Hyper {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    learning_rate: f64,
    bc1: f64,
    bc2: f64,
}

fn update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    h: &Hyper,
) -> Result<()> {
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: "gradient".to_string(),
            });
        }
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / h.bc1;
        let v_hat = v[i] / h.bc2;
        params[i] -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
    }
    Ok(())
}

/// One Adam update over every trainable parameter.
pub fn adam_step(params: &mut NetParams, grads: &NetGrads, state: &mut AdamState) -> Result<()> {
    if params.layers.len() != grads.layers.len() || params.layers.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} layers", params.layers.len()),
            found: format!("{} gradient layers", grads.layers.len()),
        });
    }
    state.step += 1;
    let h = Hyper {
        beta1: state.beta1,
        beta2: state.beta2,
        epsilon: state.epsilon,
        learning_rate: state.learning_rate,
        bc1: 1.0 - state.beta1.powi(state.step as i32),
        bc2: 1.0 - state.beta2.powi(state.step as i32),
    };
    for (li, (p, g)) in params
        .layers
        .iter_mut()
        .zip(grads.layers.iter())
        .enumerate()
    {
        if p.weight.dim() != g.weight.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", p.weight.dim()),
                found: format!("{:?}", g.weight.dim()),
            });
        }
        update_slice(
            p.weight.as_slice_mut().expect("standard layout"),
            g.weight.as_slice().expect("standard layout"),
            state.m[li].weight.as_slice_mut().expect("standard layout"),
            state.v[li].weight.as_slice_mut().expect("standard layout"),
            &h,
        )?;
        update_slice(
            p.bias.as_slice_mut().expect("standard layout"),
            g.bias.as_slice().expect("standard layout"),
            state.m[li].bias.as_slice_mut().expect("standard layout"),
            state.v[li].bias.as_slice_mut().expect("standard layout"),
            &h,
        )?;
        if let (Some(bn), Some(dg), Some(db)) = (p.bn.as_mut(), &g.gamma, &g.beta) {
            update_slice(
                bn.gamma.as_slice_mut().expect("standard layout"),
                dg.as_slice().expect("standard layout"),
                state.m[li]
                    .gamma
                    .as_mut()
                    .expect("moment shape mirrors params")
                    .as_slice_mut()
                    .expect("standard layout"),
                state.v[li]
                    .gamma
                    .as_mut()
                    .expect("moment shape mirrors params")
                    .as_slice_mut()
                    .expect("standard layout"),
                &h,
            )?;
            update_slice(
                bn.beta.as_slice_mut().expect("standard layout"),
                db.as_slice().expect("standard layout"),
                state.m[li]
                    .beta
                    .as_mut()
                    .expect("moment shape mirrors params")
                    .as_slice_mut()
                    .expect("standard layout"),
                state.v[li]
                    .beta
                    .as_mut()
                    .expect("moment shape mirrors params")
                    .as_slice_mut()
                    .expect("standard layout"),
                &h,
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{init_params, LayerGrads, NetSpec};
    use ndarray::Array1;

    fn grads_like(params: &NetParams, fill: f64) -> NetGrads {
        NetGrads {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Array4::from_elem(l.weight.dim(), fill),
                    bias: Array1::from_elem(l.bias.len(), fill),
                    gamma: l.bn.as_ref().map(|bn| Array1::from_elem(bn.gamma.len(), fill)),
                    beta: l.bn.as_ref().map(|bn| Array1::from_elem(bn.beta.len(), fill)),
                })
                .collect(),
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let spec = NetSpec::imputer(1, (3, 3));
        let mut params = init_params(&spec, 0).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params, 0.01);
        let g = grads_like(&params, 0.0);
        adam_step(&mut params, &g, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn degenerate_betas_give_sign_step() {
        let spec = NetSpec::imputer(1, (3, 3));
        let mut params = init_params(&spec, 0).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params, 0.01);
        state.beta1 = 0.0;
        state.beta2 = 0.0;
        let g = 0.5;
        let grads = grads_like(&params, g);
        adam_step(&mut params, &grads, &mut state).unwrap();
        let expect = 0.01 * g / (g.abs() + state.epsilon);
        for (l, lb) in params.layers.iter().zip(before.layers.iter()) {
            for (a, b) in l.weight.iter().zip(lb.weight.iter()) {
                assert!((b - a - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_descent_is_monotone_early() {
        // scalar oracle: minimize f(w) = w^2 from w = 1 with lr = 0.01
        let spec = NetSpec {
            input_channels: 1,
            hidden: vec![],
            output: crate::neural::ConvLayerSpec {
                in_channels: 1,
                out_channels: 1,
                kernel: (1, 1),
                activation: crate::neural::Activation::None,
                use_batchnorm: false,
                dropout_rate: 0.0,
            },
            output_shape: (1, 1),
        };
        let mut params = init_params(&spec, 0).unwrap();
        params.layers[0].weight.fill(1.0);
        let mut state = AdamState::new(&params, 0.01);
        let mut last = 1.0f64;
        for _ in 0..50 {
            let w = params.layers[0].weight[(0, 0, 0, 0)];
            let mut g = grads_like(&params, 0.0);
            g.layers[0].weight.fill(2.0 * w);
            adam_step(&mut params, &g, &mut state).unwrap();
            let now = params.layers[0].weight[(0, 0, 0, 0)].abs();
            assert!(now < last, "|w| must shrink: {now} vs {last}");
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let spec = NetSpec::imputer(1, (3, 3));
        let mut params = init_params(&spec, 0).unwrap();
        let mut state = AdamState::new(&params, 0.01);
        let mut g = grads_like(&params, 0.0);
        g.layers[0].weight[(0, 0, 0, 0)] = f64::NAN;
        assert!(adam_step(&mut params, &g, &mut state).is_err());
    }
}
