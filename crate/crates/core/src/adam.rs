//! Adam with bias correction. State (first/second moment vectors and the step
//! counter) is keyed by parameter name so it survives checkpoint-style
//! traversals of the model.

use std::collections::HashMap;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Default)]
pub struct AdamState {
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update of a single tensor's data in place.
/// `t` is the 1-based global step used for bias correction; `m`/`v` are that
/// tensor's moment accumulators. Gradients must already be finite-checked.
pub fn adam_update(
    data: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    debug_assert!(t >= 1);
    debug_assert_eq!(data.len(), grad.len());
    debug_assert_eq!(data.len(), m.len());
    debug_assert_eq!(data.len(), v.len());
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for j in 0..data.len() {
        let g = grad[j];
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[j] / bc1;
        let v_hat = v[j] / bc2;
        data[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// One optimizer step over every parameter of the model, consuming the
/// gradients accumulated by the last backward pass. The step aborts before
/// touching anything if any gradient is missing or non-finite, naming the
/// offending parameter.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    let mut problem: Option<String> = None;
    params.visit(&mut |name, tensor| {
        if problem.is_some() {
            return;
        }
        match tensor.grad() {
            None => problem = Some(format!("no gradient recorded for parameter {name}")),
            Some(g) => {
                if g.iter().any(|x| !x.is_finite()) {
                    problem = Some(format!("non-finite gradient in parameter {name}"));
                } else {
                    grads.push((name, g));
                }
            }
        }
    });
    if let Some(msg) = problem {
        return Err(Error::Numeric(msg));
    }

    state.t += 1;
    let t = state.t;
    let mut i = 0;
    params.visit_mut(&mut |name, tensor| {
        let (gname, g) = &grads[i];
        debug_assert_eq!(gname, &name);
        i += 1;
        let n = g.len();
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        adam_update(tensor.data_mut(), g, m, v, t, cfg);
    });
    Ok(())
}
