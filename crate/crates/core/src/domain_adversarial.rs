//! Source/target discriminator over per-node embedding rows and the losses
//! of the adversarial game around it.
//!
//! The discriminator is `sigmoid(LeakyReLU(z W1 + b1) W2 + b2)`; it outputs
//! the probability that a row came from a source city.

use rand::Rng;

use crate::diffcore::{forward_and_grad, init_uniform, sgd_step, Bound, DenseArray, ParamSet, Tape, Var};
use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;
const HIDDEN_SLOPE: f64 = 0.2;

/// Fresh `disc.*` parameters for embeddings of width `d′`.
pub fn init_discriminator<R: Rng>(rng: &mut R, width: usize) -> Result<ParamSet> {
    if width == 0 {
        return Err(Error::contract("discriminator width must be positive"));
    }
    let mut p = ParamSet::new();
    p.insert("disc.w1", init_uniform(rng, &[width, width], width))?;
    p.insert("disc.b1", init_uniform(rng, &[width], width))?;
    p.insert("disc.w2", init_uniform(rng, &[width, 1], width))?;
    p.insert("disc.b2", init_uniform(rng, &[1], width))?;
    Ok(p)
}

/// Discriminator weights on a tape, either as trainable leaves or frozen
/// constants.
#[derive(Clone, Copy, Debug)]
pub struct DiscVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    width: usize,
}

impl DiscVars {
    pub fn bind(tape: &mut Tape, bound: &Bound) -> Result<Self> {
        let vars = DiscVars {
            w1: bound.get("disc.w1")?,
            b1: bound.get("disc.b1")?,
            w2: bound.get("disc.w2")?,
            b2: bound.get("disc.b2")?,
            width: 0,
        };
        vars.checked(tape)
    }

    /// Copies `d_params` onto the tape as constants; no gradient reaches
    /// them.
    pub fn frozen(tape: &mut Tape, d_params: &ParamSet) -> Result<Self> {
        let mut c = |n: &str| -> Result<Var> { tape.constant(d_params.value(n)?.clone()) };
        let vars = DiscVars {
            w1: c("disc.w1")?,
            b1: c("disc.b1")?,
            w2: c("disc.w2")?,
            b2: c("disc.b2")?,
            width: 0,
        };
        vars.checked(tape)
    }

    fn checked(mut self, tape: &Tape) -> Result<Self> {
        let (d, h) = tape.dims(self.w1);
        let ok = d == h
            && tape.value(self.b1).len() == h
            && tape.dims(self.w2) == (h, 1)
            && tape.value(self.b2).len() == 1;
        if !ok {
            return Err(Error::shape("discriminator", "inconsistent layer shapes"));
        }
        self.width = d;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Source probability of every row, `R × 1`.
    pub fn probs(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let w = tape.dims(z).1;
        if w != self.width {
            return Err(Error::shape("discriminate", format!("rows of width {w}, expected {}", self.width)));
        }
        let h = tape.matmul(z, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.leaky_relu(h, HIDDEN_SLOPE)?;
        let o = tape.matmul(h, self.w2)?;
        let o = tape.add_row(o, self.b2)?;
        tape.sigmoid(o)
    }

    fn clamped(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let p = self.probs(tape, z)?;
        tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    /// `mean(−log D(s)) + mean(−log(1 − D(t)))`.
    pub fn discriminator_loss(&self, tape: &mut Tape, source: Var, target: Var) -> Result<Var> {
        let ps = self.clamped(tape, source)?;
        let ls = tape.log(ps)?;
        let ls = tape.mean(ls)?;
        let pt = self.clamped(tape, target)?;
        let qt = tape.one_minus(pt)?;
        let lt = tape.log(qt)?;
        let lt = tape.mean(lt)?;
        let total = tape.add(ls, lt)?;
        tape.scale(total, -1.0)
    }

    /// `mean(−log D(t))`: cross-entropy of target rows against the source
    /// label.
    pub fn st_domain_loss(&self, tape: &mut Tape, target: Var) -> Result<Var> {
        let p = self.clamped(tape, target)?;
        let l = tape.log(p)?;
        let l = tape.mean(l)?;
        tape.scale(l, -1.0)
    }

    /// `mean(log(1 − D(t)))`, the minimax form of the encoder objective.
    pub fn minimax_loss(&self, tape: &mut Tape, target: Var) -> Result<Var> {
        let p = self.clamped(tape, target)?;
        let q = tape.one_minus(p)?;
        let l = tape.log(q)?;
        tape.mean(l)
    }
}

/// Source rows labeled 1 and target rows labeled 0.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub source: DenseArray,
    pub target: DenseArray,
}

impl DomainBatch {
    pub fn new(source: DenseArray, target: DenseArray) -> Result<Self> {
        let (rs, cs) = source.dims2();
        let (rt, ct) = target.dims2();
        if rs == 0 || rt == 0 || source.is_empty() || target.is_empty() {
            return Err(Error::Loss("domain batch needs source and target rows".into()));
        }
        if cs != ct {
            return Err(Error::shape("DomainBatch", format!("source width {cs}, target width {ct}")));
        }
        Ok(DomainBatch { source, target })
    }

    /// Row labels, source rows first.
    pub fn labels(&self) -> Vec<f64> {
        let mut l = vec![1.0; self.source.rows()];
        l.resize(self.source.rows() + self.target.rows(), 0.0);
        l
    }
}

fn non_empty(rows: &DenseArray) -> Result<()> {
    if rows.is_empty() || rows.rows() == 0 {
        return Err(Error::Loss("no target rows".into()));
    }
    Ok(())
}

fn frozen_eval(d_params: &ParamSet, f: impl FnOnce(&mut Tape, DiscVars) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = DiscVars::frozen(&mut tape, d_params)?;
    let out = f(&mut tape, vars)?;
    tape.scalar(out)
}

pub fn discriminate(features: &DenseArray, d_params: &ParamSet) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = DiscVars::frozen(&mut tape, d_params)?;
    let z = tape.constant(features.clone())?;
    let p = vars.probs(&mut tape, z)?;
    Ok(tape.value(p).data().to_vec())
}

pub fn discriminator_loss(batch: &DomainBatch, d_params: &ParamSet) -> Result<f64> {
    frozen_eval(d_params, |t, d| {
        let s = t.constant(batch.source.clone())?;
        let g = t.constant(batch.target.clone())?;
        d.discriminator_loss(t, s, g)
    })
}

pub fn st_domain_loss(target: &DenseArray, d_params: &ParamSet) -> Result<f64> {
    non_empty(target)?;
    frozen_eval(d_params, |t, d| {
        let g = t.constant(target.clone())?;
        d.st_domain_loss(t, g)
    })
}

pub fn encoder_adversarial_loss(target: &DenseArray, d_params: &ParamSet) -> Result<f64> {
    non_empty(target)?;
    frozen_eval(d_params, |t, d| {
        let g = t.constant(target.clone())?;
        d.minimax_loss(t, g)
    })
}

/// Which encoder-side objective [`feature_gradient`] differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderObjective {
    Minimax,
    NonSaturating,
}

/// Value and gradient of an encoder-side objective with respect to the
/// target rows, with the discriminator frozen.
pub fn feature_gradient(
    target: &DenseArray,
    d_params: &ParamSet,
    objective: EncoderObjective,
) -> Result<(f64, DenseArray)> {
    non_empty(target)?;
    let mut p = ParamSet::new();
    p.insert("rows", target.clone())?;
    let loss = forward_and_grad(&mut p, |t, b| {
        let d = DiscVars::frozen(t, d_params)?;
        let rows = b.get("rows")?;
        match objective {
            EncoderObjective::Minimax => d.minimax_loss(t, rows),
            EncoderObjective::NonSaturating => d.st_domain_loss(t, rows),
        }
    })?;
    let g = p.grad("rows").expect("inserted above").clone();
    Ok((loss, g))
}

/// One plain gradient step of the discriminator on `batch`; returns the
/// loss before the step. Only `d_params` changes.
pub fn adversarial_round(batch: &DomainBatch, d_params: &mut ParamSet, lr_d: f64) -> Result<f64> {
    if !(lr_d >= 0.0) {
        return Err(Error::contract(format!("discriminator rate {lr_d}")));
    }
    d_params.zero_grads();
    let loss = forward_and_grad(d_params, |t, b| {
        let d = DiscVars::bind(t, b)?;
        let s = t.constant(batch.source.clone())?;
        let g = t.constant(batch.target.clone())?;
        d.discriminator_loss(t, s, g)
    })?;
    if lr_d > 0.0 {
        sgd_step(d_params, lr_d)?;
    }
    d_params.zero_grads();
    Ok(loss)
}
