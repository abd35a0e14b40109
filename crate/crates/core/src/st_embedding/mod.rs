//! The spatio-temporal encoder: a GRU over each node's history, graph
//! attention across neighbors, and a second GRU over the attended states.

mod gat;
mod gru;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gat::{
    attention_aggregate, attention_normalize, attention_scores, EdgeScores, GatParams, GatVars,
    LEAKY_SLOPE,
};
pub use gru::{gru_cell, gru_encode, GruParams, GruVars};

use crate::diffcore::{Bound, DenseArray, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::graph_data::{TrafficGraph, WindowBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Temporal,
    Spatial,
    SpatioTemporal,
}

/// Per-node embedding rows tagged with the encoder stage that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct StEmbedding {
    pub z: DenseArray,
    pub stage: Stage,
}

impl StEmbedding {
    pub fn new(z: DenseArray, stage: Stage) -> Self {
        StEmbedding { z, stage }
    }

    pub fn n_rows(&self) -> usize {
        self.z.rows()
    }
}

/// What the second GRU reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tf2Input {
    /// Attention applied to every first-stage hidden state; the second GRU
    /// runs over the resulting `H`-step sequence.
    Sequence,
    /// Attention applied to the final first-stage state only; the second
    /// GRU takes one step.
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub tf2_input: Tf2Input,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 1,
            hidden: 32,
            heads: 4,
            tf2_input: Tf2Input::Sequence,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(Error::contract("encoder dimensions and head count must be positive"));
        }
        Ok(())
    }
}

/// Adds freshly initialized `tf1.*`, `sf.*` and `tf2.*` entries.
pub fn init_encoder<R: Rng>(cfg: &EncoderConfig, rng: &mut R, params: &mut ParamSet) -> Result<()> {
    cfg.validate()?;
    GruParams::init(rng, cfg.input_dim, cfg.hidden).insert_into(params, "tf1")?;
    GatParams::init(rng, cfg.hidden, cfg.heads).insert_into(params, "sf")?;
    GruParams::init(rng, cfg.hidden, cfg.hidden).insert_into(params, "tf2")?;
    Ok(())
}

/// The encoder bound on a tape.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    tf1: GruVars,
    sf: GatVars,
    tf2: GruVars,
    tf2_input: Tf2Input,
}

impl EncoderVars {
    pub fn bind(tape: &mut Tape, bound: &Bound, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let tf1 = GruVars::bind(tape, bound, "tf1")?;
        let sf = GatVars::bind(tape, bound, "sf", cfg.heads, LEAKY_SLOPE)?;
        let tf2 = GruVars::bind(tape, bound, "tf2")?;
        if tf1.hidden() != cfg.hidden || tf2.input_dim(tape) != cfg.hidden || tf2.hidden() != cfg.hidden {
            return Err(Error::shape("encoder", format!("parameters do not have hidden size {}", cfg.hidden)));
        }
        Ok(EncoderVars {
            tf1,
            sf,
            tf2,
            tf2_input: cfg.tf2_input,
        })
    }

    /// Encodes `steps` (each `(B·n) × d`, rows window-major then node) into
    /// `(B·n) × d′` spatio-temporal embeddings.
    pub fn encode(&self, tape: &mut Tape, steps: &[Var], graph: &TrafficGraph) -> Result<Var> {
        let Some(&first) = steps.first() else {
            return Err(Error::contract("empty sequence"));
        };
        let rows = tape.dims(first).0;
        let n = graph.n_nodes();
        if rows == 0 || rows % n != 0 {
            return Err(Error::shape("st_embed", format!("{rows} rows for {n} nodes")));
        }
        let batch = rows / n;
        let states = self.tf1.run(tape, steps)?;
        match self.tf2_input {
            Tf2Input::Sequence => {
                let stacked = tape.concat_rows(&states)?;
                let edges = graph.edge_index(states.len() * batch);
                let spatial = self.sf.forward(tape, stacked, &edges)?;
                let seq = (0..states.len())
                    .map(|t| tape.slice_rows(spatial, t * rows, (t + 1) * rows))
                    .collect::<Result<Vec<_>>>()?;
                Ok(*self.tf2.run(tape, &seq)?.last().expect("non-empty"))
            }
            Tf2Input::Final => {
                let last = *states.last().expect("non-empty");
                let edges = graph.edge_index(batch);
                let spatial = self.sf.forward(tape, last, &edges)?;
                Ok(self.tf2.run(tape, &[spatial])?[0])
            }
        }
    }

    /// [`Self::encode`] on the history of every window in `windows`.
    pub fn encode_windows(&self, tape: &mut Tape, windows: &WindowBatch, graph: &TrafficGraph) -> Result<Var> {
        if windows.is_empty() {
            return Err(Error::EmptyBatch("no windows to encode".into()));
        }
        if windows.n_nodes != graph.n_nodes() {
            return Err(Error::shape(
                "st_embed",
                format!("windows have {} nodes, graph {}", windows.n_nodes, graph.n_nodes()),
            ));
        }
        let rows = windows.len() * windows.n_nodes;
        let steps = (0..windows.history)
            .map(|t| tape.constant(DenseArray::matrix_unchecked(rows, 1, windows.step_inputs(t))))
            .collect::<Result<Vec<_>>>()?;
        self.encode(tape, &steps, graph)
    }
}

/// Spatio-temporal embedding of one window given as `H × n × d` (or
/// `H × n` when `d = 1`).
pub fn st_embed(
    window_inputs: &DenseArray,
    graph: &TrafficGraph,
    params: &ParamSet,
    cfg: &EncoderConfig,
) -> Result<StEmbedding> {
    let shape = window_inputs.shape();
    let (h, n, d) = match *shape {
        [h, n] => (h, n, 1),
        [h, n, d] => (h, n, d),
        _ => return Err(Error::shape("st_embed", format!("window shape {shape:?}"))),
    };
    if n != graph.n_nodes() || d != cfg.input_dim {
        return Err(Error::shape(
            "st_embed",
            format!("window is {h}×{n}×{d}, graph has {} nodes, input_dim {}", graph.n_nodes(), cfg.input_dim),
        ));
    }
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let vars = EncoderVars::bind(&mut tape, &bound, cfg)?;
    let steps = (0..h)
        .map(|t| {
            let data = window_inputs.data()[t * n * d..(t + 1) * n * d].to_vec();
            tape.constant(DenseArray::matrix_unchecked(n, d, data))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = vars.encode(&mut tape, &steps, graph)?;
    Ok(StEmbedding::new(tape.value(out).clone(), Stage::SpatioTemporal))
}
