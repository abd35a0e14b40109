//! Shared affine output layer `z W + b` from embeddings to `M` predicted
//! steps, and the losses scored on it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{init_uniform, Bound, DenseArray, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::st_embedding::{Stage, StEmbedding};

/// Adds fresh `head.w` (`d′ × M`) and `head.b` (`M`).
pub fn init_head<R: Rng>(rng: &mut R, width: usize, horizon: usize, params: &mut ParamSet) -> Result<()> {
    if width == 0 || horizon == 0 {
        return Err(Error::contract("head dimensions must be positive"));
    }
    params.insert("head.w", init_uniform(rng, &[width, horizon], width))?;
    params.insert("head.b", init_uniform(rng, &[horizon], width))?;
    Ok(())
}

/// How squared residuals are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    #[default]
    Rmse,
    Mse,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    w: Var,
    b: Var,
}

impl HeadVars {
    pub fn bind(tape: &mut Tape, bound: &Bound) -> Result<Self> {
        let w = bound.get("head.w")?;
        let b = bound.get("head.b")?;
        if tape.value(b).len() != tape.dims(w).1 {
            return Err(Error::shape("head", "bias length differs from horizon"));
        }
        Ok(HeadVars { w, b })
    }

    pub fn horizon(&self, tape: &Tape) -> usize {
        tape.dims(self.w).1
    }

    pub fn predict(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let p = tape.matmul(z, self.w)?;
        tape.add_row(p, self.b)
    }
}

/// Masked residual loss on a tape. `mask` holds 1.0 for scored entries and
/// 0.0 elsewhere.
pub fn masked_loss(tape: &mut Tape, pred: Var, truth: &DenseArray, mask: &DenseArray, form: LossForm) -> Result<Var> {
    let dims = tape.dims(pred);
    if truth.dims2() != dims || mask.dims2() != dims {
        return Err(Error::shape(
            "prediction_loss",
            format!("pred {:?}, truth {:?}, mask {:?}", dims, truth.dims2(), mask.dims2()),
        ));
    }
    let count: f64 = mask.data().iter().sum();
    if count == 0.0 {
        return Err(Error::Loss("every target entry is masked".into()));
    }
    let t = tape.constant(truth.clone())?;
    let m = tape.constant(mask.clone())?;
    let d = tape.sub(pred, t)?;
    let d = tape.mul(d, m)?;
    let d2 = tape.mul(d, d)?;
    let s = tape.sum(d2)?;
    let mse = tape.scale(s, 1.0 / count)?;
    match form {
        LossForm::Rmse => tape.sqrt(mse),
        LossForm::Mse => Ok(mse),
    }
}

/// Per-node predictions `n × M` in normalized units.
pub fn predict(z: &StEmbedding, params: &ParamSet) -> Result<DenseArray> {
    if z.stage != Stage::SpatioTemporal {
        return Err(Error::contract(format!("head expects a spatio-temporal embedding, got {:?}", z.stage)));
    }
    let mut tape = Tape::new();
    let w = tape.constant(params.value("head.w")?.clone())?;
    let b = tape.constant(params.value("head.b")?.clone())?;
    if tape.value(b).len() != tape.dims(w).1 {
        return Err(Error::shape("head", "bias length differs from horizon"));
    }
    let zv = tape.constant(z.z.clone())?;
    let out = HeadVars { w, b }.predict(&mut tape, zv)?;
    Ok(tape.value(out).clone())
}

/// `sqrt(mean((pred − truth)²))` over the entries whose mask is set.
pub fn prediction_loss(pred: &DenseArray, truth: &DenseArray, mask: &[bool]) -> Result<f64> {
    if pred.shape() != truth.shape() || mask.len() != pred.len() {
        return Err(Error::shape(
            "prediction_loss",
            format!("pred {:?}, truth {:?}, mask {}", pred.shape(), truth.shape(), mask.len()),
        ));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((p, t), &m) in pred.data().iter().zip(truth.data()).zip(mask) {
        if m {
            sum += (p - t) * (p - t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Loss("every target entry is masked".into()));
    }
    Ok((sum / n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_p: f64,
    pub l_st: f64,
    pub l_overall: f64,
    pub lambda: f64,
}

/// `λ·l_st + l_p`. `λ = 0` is accepted for the ablation without the
/// domain term.
pub fn overall_loss(l_p: f64, l_st: f64, lambda: f64) -> Result<LossReport> {
    if !(l_p >= 0.0) || !(l_st >= 0.0) {
        return Err(Error::contract(format!("negative loss component (l_p {l_p}, l_st {l_st})")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::contract(format!("lambda {lambda}")));
    }
    Ok(LossReport {
        l_p,
        l_st,
        l_overall: lambda * l_st + l_p,
        lambda,
    })
}
