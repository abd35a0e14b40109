use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{forward, forward_and_grad, Bound, DenseArray, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::graph_data::{TrafficGraph, WindowBatch};
use crate::inference_head::{init_head, masked_loss, HeadVars, LossForm};
use crate::st_embedding::{init_encoder, EncoderConfig, EncoderVars};

/// Windows pushed through one forward pass when predicting or embedding
/// large sets.
const EVAL_CHUNK: usize = 32;

/// Encoder plus head: the parameters `θ` the trainer optimizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Model {
    pub encoder: EncoderConfig,
    /// Predicted steps `M`.
    pub horizon: usize,
}

impl Default for Model {
    fn default() -> Self {
        Model {
            encoder: EncoderConfig::default(),
            horizon: 6,
        }
    }
}

/// The model bound on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

impl ModelVars {
    pub fn embed(&self, tape: &mut Tape, batch: &WindowBatch, graph: &TrafficGraph) -> Result<Var> {
        self.encoder.encode_windows(tape, batch, graph)
    }

    /// Prediction loss over every valid target entry of `batch`, plus the
    /// embeddings it was computed from.
    pub fn loss(&self, tape: &mut Tape, batch: &WindowBatch, graph: &TrafficGraph, form: LossForm) -> Result<(Var, Var)> {
        let z = self.embed(tape, batch, graph)?;
        let pred = self.head.predict(tape, z)?;
        let (truth, mask) = batch.target_rows();
        Ok((masked_loss(tape, pred, &truth, &mask, form)?, z))
    }
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.horizon == 0 {
            return Err(Error::contract("horizon must be positive"));
        }
        Ok(())
    }

    /// Fresh `tf1.*`, `sf.*`, `tf2.*` and `head.*` parameters.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<ParamSet> {
        self.validate()?;
        let mut p = ParamSet::new();
        init_encoder(&self.encoder, rng, &mut p)?;
        init_head(rng, self.encoder.hidden, self.horizon, &mut p)?;
        Ok(p)
    }

    pub fn bind(&self, tape: &mut Tape, bound: &Bound) -> Result<ModelVars> {
        let encoder = EncoderVars::bind(tape, bound, &self.encoder)?;
        let head = HeadVars::bind(tape, bound)?;
        if head.horizon(tape) != self.horizon {
            return Err(Error::shape(
                "model",
                format!("head predicts {} steps, model has horizon {}", head.horizon(tape), self.horizon),
            ));
        }
        Ok(ModelVars { encoder, head })
    }

    fn check_batch(&self, batch: &WindowBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("empty window set".into()));
        }
        if batch.horizon != self.horizon {
            return Err(Error::shape(
                "task_loss",
                format!("windows have horizon {}, model {}", batch.horizon, self.horizon),
            ));
        }
        Ok(())
    }

    /// Prediction loss of `theta` over the whole window set.
    pub fn task_loss(&self, theta: &ParamSet, batch: &WindowBatch, graph: &TrafficGraph, form: LossForm) -> Result<f64> {
        self.check_batch(batch)?;
        forward(theta, |t, b| Ok(self.bind(t, b)?.loss(t, batch, graph, form)?.0))
    }

    /// Adds the gradient of [`Self::task_loss`] into `theta`'s gradient
    /// buffers and returns the loss.
    pub fn accumulate_task_grad(
        &self,
        theta: &mut ParamSet,
        batch: &WindowBatch,
        graph: &TrafficGraph,
        form: LossForm,
    ) -> Result<f64> {
        self.check_batch(batch)?;
        forward_and_grad(theta, |t, b| Ok(self.bind(t, b)?.loss(t, batch, graph, form)?.0))
    }

    /// Normalized predictions `(B·n) × M` in encoder row order.
    pub fn predict(&self, theta: &ParamSet, batch: &WindowBatch, graph: &TrafficGraph) -> Result<DenseArray> {
        self.check_batch(batch)?;
        self.chunked(theta, batch, self.horizon, |t, vars, b| {
            let z = vars.embed(t, b, graph)?;
            vars.head.predict(t, z)
        })
    }

    /// Spatio-temporal embeddings `(B·n) × d′`.
    pub fn embed(&self, theta: &ParamSet, batch: &WindowBatch, graph: &TrafficGraph) -> Result<DenseArray> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch("empty window set".into()));
        }
        self.chunked(theta, batch, self.encoder.hidden, |t, vars, b| vars.embed(t, b, graph))
    }

    fn chunked(
        &self,
        theta: &ParamSet,
        batch: &WindowBatch,
        cols: usize,
        f: impl Fn(&mut Tape, &ModelVars, &WindowBatch) -> Result<Var>,
    ) -> Result<DenseArray> {
        let mut out = Vec::with_capacity(batch.len() * batch.n_nodes * cols);
        let mut from = 0;
        while from < batch.len() {
            let part = batch.slice(from, from + EVAL_CHUNK);
            let mut tape = Tape::new();
            let bound = tape.bind_constants(theta)?;
            let vars = self.bind(&mut tape, &bound)?;
            let v = f(&mut tape, &vars, &part)?;
            out.extend_from_slice(tape.value(v).data());
            from += part.len();
        }
        DenseArray::matrix(batch.len() * batch.n_nodes, cols, out)
    }
}
