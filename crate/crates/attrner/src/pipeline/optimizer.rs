//! AdamW with decoupled weight decay and bias correction.

use thiserror::Error;

use crate::model::params::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in tensor {0:?}; aborting the update")]
    NonFiniteGradient(String),
    #[error("gradient shape mismatch for tensor {0:?}")]
    ShapeMismatch(String),
}

/// First/second moment accumulators plus the update counter.
pub struct AdamState {
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> AdamState {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// One AdamW update over every registered tensor. Weight decay is decoupled
/// and skipped for tensors registered with `decay = false` (biases, layer
/// norms, embeddings). Errors out before touching any parameter if a
/// gradient is non-finite.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    for (name, entry) in grads.iter() {
        if entry.tensor.len() != params.get(name).len() {
            return Err(OptimError::ShapeMismatch(name.clone()));
        }
        if entry.tensor.data.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient(name.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, entry) in params.iter_mut() {
        let g = &grads.get(name).data;
        let m = &mut state.m.get_mut(name).data;
        for (mi, &gi) in m.iter_mut().zip(g.iter()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
        }
        let v = &mut state.v.get_mut(name).data;
        for (vi, &gi) in v.iter_mut().zip(g.iter()) {
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        }
        let m = &state.m.get(name).data;
        let v = &state.v.get(name).data;
        let wd = if entry.decay { weight_decay } else { 0.0 };
        for ((pi, &mi), &vi) in entry.tensor.data.iter_mut().zip(m.iter()).zip(v.iter()) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * *pi);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Tensor;

    fn single(value: f64, decay: bool) -> ParamSet {
        let mut p = ParamSet::new();
        p.register("w", Tensor::filled(&[1], value), decay);
        p
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // t=1: m=(1-b1)g, v=(1-b2)g^2, m_hat=g, v_hat=g^2,
        // update = lr * (g/(|g|+eps) + wd*p)
        let mut p = single(2.0, true);
        let mut g = p.zeros_like();
        g.get_mut("w").data[0] = 0.5;
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut st, 0.1, 0.01).unwrap();
        let expected = 2.0 - 0.1 * (0.5 / (0.5 + ADAM_EPS) + 0.01 * 2.0);
        assert!((p.get("w").data[0] - expected).abs() < 1e-12);
        assert_eq!(st.steps_taken(), 1);
    }

    #[test]
    fn no_decay_tensor_skips_weight_decay() {
        let mut p = single(2.0, false);
        let g = p.zeros_like(); // zero gradient
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut st, 0.1, 0.5).unwrap();
        assert_eq!(p.get("w").data[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut p = single(1.0, true);
        let mut g = p.zeros_like();
        g.get_mut("w").data[0] = f64::NAN;
        let mut st = AdamState::new(&p);
        let err = adamw_step(&mut p, &g, &mut st, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("\"w\""), "{err}");
        // parameters untouched on abort
        assert_eq!(p.get("w").data[0], 1.0);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (w-3)^2 from w=0
        let mut p = single(0.0, false);
        let mut st = AdamState::new(&p);
        for _ in 0..2000 {
            let w = p.get("w").data[0];
            let mut g = p.zeros_like();
            g.get_mut("w").data[0] = 2.0 * (w - 3.0);
            adamw_step(&mut p, &g, &mut st, 0.05, 0.0).unwrap();
        }
        assert!((p.get("w").data[0] - 3.0).abs() < 1e-3);
    }
}
