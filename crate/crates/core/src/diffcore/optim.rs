use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{DenseArray, ParamSet};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    PlainGradientDescent,
    AdaptiveMoment,
}

/// Step size plus, for the adaptive-moment kind, per-parameter first and
/// second moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step_size: f64,
    step: u64,
    first: IndexMap<String, DenseArray>,
    second: IndexMap<String, DenseArray>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, step_size: f64) -> Result<Self> {
        if !(step_size >= 0.0 && step_size.is_finite()) {
            return Err(Error::contract(format!("invalid step size {step_size}")));
        }
        Ok(OptimizerState {
            kind,
            step_size,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        })
    }

    pub fn adam(step_size: f64) -> Result<Self> {
        Self::new(OptimizerKind::AdaptiveMoment, step_size)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update of this optimizer's kind.
    pub fn apply(&mut self, params: &mut ParamSet) -> Result<()> {
        match self.kind {
            OptimizerKind::PlainGradientDescent => {
                sgd_step(params, self.step_size)?;
                self.step += 1;
                Ok(())
            }
            OptimizerKind::AdaptiveMoment => adam_step(params, self),
        }
    }
}

/// `p ← p − lr · ∇p` for every entry. Gradients are left in place.
pub fn sgd_step(params: &mut ParamSet, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!("invalid learning rate {lr}")));
    }
    for (_, value, grad) in params.entries_with_grads()? {
        for (p, g) in value.data_mut().iter_mut().zip(grad.data()) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// Bias-corrected adaptive-moment update (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
pub fn adam_step(params: &mut ParamSet, state: &mut OptimizerState) -> Result<()> {
    if state.kind != OptimizerKind::AdaptiveMoment {
        return Err(Error::contract("adam_step needs an adaptive-moment state"));
    }
    let entries = params.entries_with_grads()?;
    for (name, value, _) in &entries {
        for buf in [&state.first, &state.second] {
            if let Some(b) = buf.get(*name) {
                if b.shape() != value.shape() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("moment buffer for `{name}` is {:?}, parameter is {:?}", b.shape(), value.shape()),
                    ));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let lr = state.step_size;
    for (name, value, grad) in entries {
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| DenseArray::zeros(value.shape()));
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| DenseArray::zeros(value.shape()));
        for (((p, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grads: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("p", DenseArray::vector(values.to_vec())).unwrap();
        p.accumulate_grad("p", grads, 1.0).unwrap();
        p
    }

    fn values(p: &ParamSet) -> Vec<f64> {
        p.value("p").unwrap().data().to_vec()
    }

    #[test]
    fn sgd_single_step() {
        let mut p = param(&[1.0], &[2.0]);
        sgd_step(&mut p, 0.01).unwrap();
        assert!((values(&p)[0] - 0.98).abs() < 1e-15);
        assert_eq!(p.grad("p").unwrap().data(), &[2.0]);
    }

    #[test]
    fn sgd_zero_rate_is_identity() {
        let mut p = param(&[1.25, -3.0], &[0.7, 9.0]);
        let before = p.clone();
        sgd_step(&mut p, 0.0).unwrap();
        assert!(p.values_equal(&before));
    }

    #[test]
    fn sgd_two_steps_equal_summed_displacement() {
        let g = [0.3, -1.7, 2.5];
        let mut twice = param(&[1.0, 2.0, 3.0], &g);
        sgd_step(&mut twice, 0.05).unwrap();
        sgd_step(&mut twice, 0.05).unwrap();
        let mut once = param(&[1.0, 2.0, 3.0], &g);
        sgd_step(&mut once, 0.1).unwrap();
        for (a, b) in values(&twice).iter().zip(values(&once)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sgd_missing_grad_is_contract_violation() {
        let mut p = param(&[1.0], &[1.0]);
        p.drop_grad("p");
        assert!(matches!(sgd_step(&mut p, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_first_step_moves_by_step_size() {
        for g in [1e-3, 0.5, 40.0, -7.0] {
            let mut p = param(&[0.0], &[g]);
            let mut st = OptimizerState::adam(0.001).unwrap();
            adam_step(&mut p, &mut st).unwrap();
            let moved = values(&p)[0].abs();
            assert!((moved - 0.001).abs() < 1e-7, "g={g} moved {moved}");
            assert_eq!(st.steps(), 1);
        }
    }

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let mut p = param(&[0.4, -2.0], &[0.0, 0.0]);
        let before = p.clone();
        let mut st = OptimizerState::adam(0.1).unwrap();
        for _ in 0..50 {
            adam_step(&mut p, &mut st).unwrap();
        }
        assert!(p.values_equal(&before));
        assert_eq!(st.steps(), 50);
    }

    #[test]
    fn adam_matches_hand_rolled_reference() {
        let grads = [[0.5, -1.0, 2.0], [0.1, 0.2, -0.3], [1.5, 0.0, 0.7], [-0.2, -0.4, 0.9], [0.0, 3.0, -1.1]];
        let mut p = ParamSet::new();
        p.insert("p", DenseArray::vector(vec![1.0, -0.5, 0.25])).unwrap();
        let mut st = OptimizerState::adam(0.01).unwrap();

        let mut x = [1.0f64, -0.5, 0.25];
        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        for (t, g) in grads.iter().enumerate() {
            p.zero_grads();
            p.accumulate_grad("p", g, 1.0).unwrap();
            adam_step(&mut p, &mut st).unwrap();

            let t = (t + 1) as i32;
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                x[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in values(&p).iter().zip(x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_rejects_plain_state() {
        let mut p = param(&[0.0], &[1.0]);
        let mut st = OptimizerState::new(OptimizerKind::PlainGradientDescent, 0.1).unwrap();
        assert!(adam_step(&mut p, &mut st).is_err());
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = param(&[0.0, 1.0], &[1.0, 1.0]);
        let mut st = OptimizerState::adam(0.1).unwrap();
        adam_step(&mut p, &mut st).unwrap();
        let mut q = param(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0]);
        assert!(matches!(adam_step(&mut q, &mut st), Err(Error::Shape { .. })));
    }
}
