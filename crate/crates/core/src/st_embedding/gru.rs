use rand::Rng;

use super::{Stage, StEmbedding};
use crate::diffcore::{init_uniform, Bound, DenseArray, ParamSet, Tape, Var};
use crate::error::{Error, Result};

const NAMES: [&str; 12] = [
    "w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn", "b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn",
];

/// Weights of one GRU layer. Input weights are `d × d′`, hidden weights
/// `d′ × d′`, biases length `d′`; the layer computes `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_ir: DenseArray,
    pub w_iz: DenseArray,
    pub w_in: DenseArray,
    pub w_hr: DenseArray,
    pub w_hz: DenseArray,
    pub w_hn: DenseArray,
    pub b_ir: DenseArray,
    pub b_iz: DenseArray,
    pub b_in: DenseArray,
    pub b_hr: DenseArray,
    pub b_hz: DenseArray,
    pub b_hn: DenseArray,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let wi = || DenseArray::zeros(&[input_dim, hidden]);
        let wh = || DenseArray::zeros(&[hidden, hidden]);
        let b = || DenseArray::zeros(&[hidden]);
        GruParams {
            w_ir: wi(),
            w_iz: wi(),
            w_in: wi(),
            w_hr: wh(),
            w_hz: wh(),
            w_hn: wh(),
            b_ir: b(),
            b_iz: b(),
            b_in: b(),
            b_hr: b(),
            b_hz: b(),
            b_hn: b(),
        }
    }

    /// Uniform in `±sqrt(1/d′)` for every array.
    pub fn init<R: Rng>(rng: &mut R, input_dim: usize, hidden: usize) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        for a in p.arrays_mut() {
            *a = init_uniform(rng, &a.shape().to_vec(), hidden);
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_ir.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_ir.cols()
    }

    fn arrays(&self) -> [&DenseArray; 12] {
        [
            &self.w_ir, &self.w_iz, &self.w_in, &self.w_hr, &self.w_hz, &self.w_hn, &self.b_ir,
            &self.b_iz, &self.b_in, &self.b_hr, &self.b_hz, &self.b_hn,
        ]
    }

    fn arrays_mut(&mut self) -> [&mut DenseArray; 12] {
        [
            &mut self.w_ir,
            &mut self.w_iz,
            &mut self.w_in,
            &mut self.w_hr,
            &mut self.w_hz,
            &mut self.w_hn,
            &mut self.b_ir,
            &mut self.b_iz,
            &mut self.b_in,
            &mut self.b_hr,
            &mut self.b_hz,
            &mut self.b_hn,
        ]
    }

    pub fn insert_into(&self, params: &mut ParamSet, prefix: &str) -> Result<()> {
        for (name, a) in NAMES.iter().zip(self.arrays()) {
            params.insert(format!("{prefix}.{name}"), a.clone())?;
        }
        Ok(())
    }

    pub fn from_params(params: &ParamSet, prefix: &str) -> Result<Self> {
        let mut p = Self::zeros(1, 1);
        for (name, a) in NAMES.iter().zip(p.arrays_mut()) {
            *a = params.value(&format!("{prefix}.{name}"))?.clone();
        }
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let (d, h) = (self.input_dim(), self.hidden());
        let ok = [&self.w_ir, &self.w_iz, &self.w_in].iter().all(|w| w.dims2() == (d, h))
            && [&self.w_hr, &self.w_hz, &self.w_hn].iter().all(|w| w.dims2() == (h, h))
            && self.arrays()[6..].iter().all(|b| b.len() == h);
        if ok {
            Ok(())
        } else {
            Err(Error::shape("GruParams", format!("inconsistent with d={d}, d'={h}")))
        }
    }
}

/// A GRU layer bound on a tape, with the three gates' weights laid side by
/// side so each step needs two matrix products.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    w_i: Var,
    w_h: Var,
    b_i: Var,
    b_h: Var,
    hidden: usize,
}

impl GruVars {
    pub fn bind(tape: &mut Tape, bound: &Bound, prefix: &str) -> Result<Self> {
        let get = |n: &str| bound.get(&format!("{prefix}.{n}"));
        let w_i = tape.concat_cols(&[get("w_ir")?, get("w_iz")?, get("w_in")?])?;
        let w_h = tape.concat_cols(&[get("w_hr")?, get("w_hz")?, get("w_hn")?])?;
        let b_i = tape.concat_cols(&[get("b_ir")?, get("b_iz")?, get("b_in")?])?;
        let b_h = tape.concat_cols(&[get("b_hr")?, get("b_hz")?, get("b_hn")?])?;
        let hidden = tape.dims(w_h).0;
        Ok(GruVars { w_i, w_h, b_i, b_h, hidden })
    }

    pub fn from_params(tape: &mut Tape, p: &GruParams) -> Result<Self> {
        p.check()?;
        let mut set = ParamSet::new();
        p.insert_into(&mut set, "gru")?;
        let bound = tape.bind(&set)?;
        Self::bind(tape, &bound, "gru")
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_dim(&self, tape: &Tape) -> usize {
        tape.dims(self.w_i).0
    }

    /// One step for every row: `x` is `R × d`, `h` is `R × d′`.
    ///
    /// ```text
    /// r = σ(x W_ir + b_ir + h W_hr + b_hr)
    /// z = σ(x W_iz + b_iz + h W_hz + b_hz)
    /// n = tanh(x W_in + b_in + r ∗ (h W_hn + b_hn))
    /// h' = (1 − z) ∗ n + z ∗ h
    /// ```
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let gi = tape.matmul(x, self.w_i)?;
        let gi = tape.add_row(gi, self.b_i)?;
        let gh = tape.matmul(h, self.w_h)?;
        let gh = tape.add_row(gh, self.b_h)?;
        tape.gru_gates(gi, gh, h)
    }

    /// Runs the sequence from a zero state and returns every hidden state.
    pub fn run(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Vec<Var>> {
        let Some(&first) = inputs.first() else {
            return Err(Error::contract("empty sequence"));
        };
        let rows = tape.dims(first).0;
        let mut h = tape.constant(DenseArray::matrix_unchecked(rows, self.hidden, vec![0.0; rows * self.hidden]))?;
        let mut states = Vec::with_capacity(inputs.len());
        for &x in inputs {
            h = self.step(tape, x, h)?;
            states.push(h);
        }
        Ok(states)
    }
}

/// Single GRU step for one node.
pub fn gru_cell(x: &[f64], h_prev: &[f64], params: &GruParams) -> Result<Vec<f64>> {
    params.check()?;
    if x.len() != params.input_dim() || h_prev.len() != params.hidden() {
        return Err(Error::shape(
            "gru_cell",
            format!(
                "x has {}, h has {}; layer is {}→{}",
                x.len(),
                h_prev.len(),
                params.input_dim(),
                params.hidden()
            ),
        ));
    }
    let mut tape = Tape::new();
    let vars = GruVars::from_params(&mut tape, params)?;
    let xv = tape.constant(DenseArray::matrix(1, x.len(), x.to_vec())?)?;
    let hv = tape.constant(DenseArray::matrix(1, h_prev.len(), h_prev.to_vec())?)?;
    let out = vars.step(&mut tape, xv, hv)?;
    Ok(tape.value(out).data().to_vec())
}

/// Encodes `H × n × d` per-node sequences (rank 2 `H × n` when `d = 1`)
/// and returns the final hidden states as the temporal embedding.
pub fn gru_encode(sequence: &DenseArray, params: &GruParams) -> Result<StEmbedding> {
    params.check()?;
    let shape = sequence.shape();
    let (h_len, n, d) = match *shape {
        [h, n] => (h, n, 1),
        [h, n, d] => (h, n, d),
        _ => return Err(Error::shape("gru_encode", format!("sequence shape {shape:?}"))),
    };
    if d != params.input_dim() {
        return Err(Error::shape("gru_encode", format!("feature dim {d} vs {}", params.input_dim())));
    }
    let mut tape = Tape::new();
    let vars = GruVars::from_params(&mut tape, params)?;
    let steps = (0..h_len)
        .map(|t| {
            let data = sequence.data()[t * n * d..(t + 1) * n * d].to_vec();
            tape.constant(DenseArray::matrix_unchecked(n, d, data))
        })
        .collect::<Result<Vec<_>>>()?;
    let states = vars.run(&mut tape, &steps)?;
    let last = *states.last().expect("non-empty");
    Ok(StEmbedding::new(tape.value(last).clone(), Stage::Temporal))
}
