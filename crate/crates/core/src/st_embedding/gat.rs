use std::sync::Arc;

use rand::Rng;

use super::{Stage, StEmbedding};
use crate::diffcore::{init_uniform, Bound, DenseArray, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::graph_data::{EdgeIndex, TrafficGraph};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Multi-head attention weights: per head a `d′ × O` transform and a
/// scoring vector of length `2·O` whose first half scores the aggregating
/// node and second half the neighbor.
#[derive(Clone, Debug, PartialEq)]
pub struct GatParams {
    pub head_w: Vec<DenseArray>,
    pub head_a: Vec<DenseArray>,
    pub leaky_slope: f64,
}

impl GatParams {
    pub fn init<R: Rng>(rng: &mut R, hidden: usize, heads: usize) -> Self {
        let mut head_w = Vec::with_capacity(heads);
        let mut head_a = Vec::with_capacity(heads);
        for _ in 0..heads {
            head_w.push(init_uniform(rng, &[hidden, hidden], hidden));
            head_a.push(init_uniform(rng, &[2 * hidden], 2 * hidden));
        }
        GatParams {
            head_w,
            head_a,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    pub fn heads(&self) -> usize {
        self.head_w.len()
    }

    pub fn out_dim(&self) -> usize {
        self.head_w.first().map_or(0, DenseArray::cols)
    }

    pub fn insert_into(&self, params: &mut ParamSet, prefix: &str) -> Result<()> {
        self.check(None)?;
        for (k, (w, a)) in self.head_w.iter().zip(&self.head_a).enumerate() {
            params.insert(format!("{prefix}.w{k}"), w.clone())?;
            params.insert(format!("{prefix}.a{k}"), a.clone())?;
        }
        Ok(())
    }

    pub fn from_params(params: &ParamSet, prefix: &str, heads: usize) -> Result<Self> {
        let mut p = GatParams {
            head_w: Vec::with_capacity(heads),
            head_a: Vec::with_capacity(heads),
            leaky_slope: LEAKY_SLOPE,
        };
        for k in 0..heads {
            p.head_w.push(params.value(&format!("{prefix}.w{k}"))?.clone());
            p.head_a.push(params.value(&format!("{prefix}.a{k}"))?.clone());
        }
        p.check(None)?;
        Ok(p)
    }

    fn check(&self, in_dim: Option<usize>) -> Result<()> {
        if self.heads() == 0 || self.head_a.len() != self.heads() {
            return Err(Error::shape("GatParams", "need at least one head with a scoring vector"));
        }
        let (d, o) = self.head_w[0].dims2();
        if let Some(want) = in_dim {
            if want != d {
                return Err(Error::shape("GatParams", format!("input width {want} vs {d}")));
            }
        }
        for (w, a) in self.head_w.iter().zip(&self.head_a) {
            if w.dims2() != (d, o) || a.len() != 2 * o {
                return Err(Error::shape("GatParams", "heads disagree in shape"));
            }
        }
        Ok(())
    }

    fn on_tape(&self, tape: &mut Tape) -> Result<GatVars> {
        let mut set = ParamSet::new();
        self.insert_into(&mut set, "sf")?;
        let bound = tape.bind(&set)?;
        GatVars::bind(tape, &bound, "sf", self.heads(), self.leaky_slope)
    }
}

/// Attention weights bound on a tape.
#[derive(Clone, Debug)]
pub struct GatVars {
    w: Vec<Var>,
    a_dst: Vec<Var>,
    a_src: Vec<Var>,
    slope: f64,
}

impl GatVars {
    pub fn bind(tape: &mut Tape, bound: &Bound, prefix: &str, heads: usize, slope: f64) -> Result<Self> {
        if heads == 0 {
            return Err(Error::contract("attention needs at least one head"));
        }
        let mut vars = GatVars {
            w: Vec::with_capacity(heads),
            a_dst: Vec::with_capacity(heads),
            a_src: Vec::with_capacity(heads),
            slope,
        };
        for k in 0..heads {
            let w = bound.get(&format!("{prefix}.w{k}"))?;
            let a = bound.get(&format!("{prefix}.a{k}"))?;
            let o = tape.dims(w).1;
            if tape.value(a).len() != 2 * o {
                return Err(Error::shape("attention", format!("head {k}: scoring vector vs width {o}")));
            }
            let a1 = tape.slice_cols(a, 0, o)?;
            let a2 = tape.slice_cols(a, o, 2 * o)?;
            vars.w.push(w);
            vars.a_dst.push(tape.transpose(a1)?);
            vars.a_src.push(tape.transpose(a2)?);
        }
        Ok(vars)
    }

    pub fn heads(&self) -> usize {
        self.w.len()
    }

    /// `W_k z` for every row.
    pub fn transform(&self, tape: &mut Tape, k: usize, z: Var) -> Result<Var> {
        tape.matmul(z, self.w[k])
    }

    /// Edge scores `LeakyReLU(a_kᵀ[W_k z_i ‖ W_k z_j])` as an `E × 1`
    /// column in edge-index order, `i` the destination and `j` the source.
    pub fn scores(&self, tape: &mut Tape, k: usize, wz: Var, edges: &EdgeIndex) -> Result<Var> {
        let s_dst = tape.matmul(wz, self.a_dst[k])?;
        let s_src = tape.matmul(wz, self.a_src[k])?;
        let e_dst = tape.gather_rows(s_dst, edges.dst.clone())?;
        let e_src = tape.gather_rows(s_src, edges.src.clone())?;
        let e = tape.add(e_dst, e_src)?;
        tape.leaky_relu(e, self.slope)
    }

    /// `ELU((1/K) Σ_k Σ_j α_ij W_k z_j)` from per-head transforms and
    /// normalized edge weights.
    pub fn aggregate(&self, tape: &mut Tape, wz: &[Var], alpha: &[Var], edges: &EdgeIndex) -> Result<Var> {
        if wz.len() != self.heads() || alpha.len() != self.heads() {
            return Err(Error::shape(
                "attention_aggregate",
                format!("{} heads, got {} transforms and {} weight sets", self.heads(), wz.len(), alpha.len()),
            ));
        }
        let mut total = None;
        for (&h, &a) in wz.iter().zip(alpha) {
            let agg = tape.spmm(a, h, edges.src.clone(), edges.offsets.clone())?;
            total = Some(match total {
                None => agg,
                Some(t) => tape.add(t, agg)?,
            });
        }
        let mean = tape.scale(total.expect("at least one head"), 1.0 / self.heads() as f64)?;
        tape.elu(mean)
    }

    /// Full spatial layer over `z` whose rows are blocks of the graph's
    /// nodes, as described by `edges`.
    pub fn forward(&self, tape: &mut Tape, z: Var, edges: &EdgeIndex) -> Result<Var> {
        let rows = tape.dims(z).0;
        if rows != edges.n_nodes * edges.copies {
            return Err(Error::shape(
                "attention",
                format!("{rows} rows vs {} copies of {} nodes", edges.copies, edges.n_nodes),
            ));
        }
        let mut wz = Vec::with_capacity(self.heads());
        let mut alpha = Vec::with_capacity(self.heads());
        for k in 0..self.heads() {
            let h = self.transform(tape, k, z)?;
            let e = self.scores(tape, k, h, edges)?;
            alpha.push(tape.segment_softmax(e, edges.offsets.clone())?);
            wz.push(h);
        }
        self.aggregate(tape, &wz, &alpha, edges)
    }
}

/// Per-edge values over the masked neighborhoods `N_i` of one graph. The
/// entries of node `i` occupy `offsets[i]..offsets[i + 1]` and are ordered
/// like [`TrafficGraph::neighbors`].
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeScores {
    pub offsets: Arc<[usize]>,
    pub neighbors: Arc<[usize]>,
    pub values: Vec<f64>,
}

impl EdgeScores {
    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Neighbors of `i` and their values.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.neighbors[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (nb, v) = self.row(i);
        nb.iter().position(|&x| x == j).map(|p| v[p])
    }
}

fn check_embedding(z: &StEmbedding, graph: &TrafficGraph) -> Result<()> {
    if z.n_rows() != graph.n_nodes() {
        return Err(Error::shape(
            "attention",
            format!("{} embedding rows for {} nodes", z.n_rows(), graph.n_nodes()),
        ));
    }
    Ok(())
}

/// Raw scores `e_ij` of one head.
pub fn attention_scores(
    z: &StEmbedding,
    graph: &TrafficGraph,
    head: usize,
    params: &GatParams,
) -> Result<EdgeScores> {
    if z.stage == Stage::SpatioTemporal {
        return Err(Error::contract("attention scores take a temporal or spatial embedding"));
    }
    check_embedding(z, graph)?;
    params.check(Some(z.z.cols()))?;
    if head >= params.heads() {
        return Err(Error::shape("attention_scores", format!("head {head} of {}", params.heads())));
    }
    let edges = graph.edge_index(1);
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape)?;
    let zv = tape.constant(z.z.clone())?;
    let wz = vars.transform(&mut tape, head, zv)?;
    let e = vars.scores(&mut tape, head, wz, &edges)?;
    Ok(EdgeScores {
        offsets: edges.offsets,
        neighbors: edges.src,
        values: tape.value(e).data().to_vec(),
    })
}

/// Softmax of each node's scores over its neighborhood.
pub fn attention_normalize(e: &EdgeScores) -> Result<EdgeScores> {
    let mut values = e.values.clone();
    for w in e.offsets.windows(2) {
        let seg = &mut values[w[0]..w[1]];
        if seg.is_empty() {
            return Err(Error::contract("node with an empty neighborhood"));
        }
        let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in seg.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        seg.iter_mut().for_each(|x| *x /= total);
    }
    Ok(EdgeScores {
        offsets: e.offsets.clone(),
        neighbors: e.neighbors.clone(),
        values,
    })
}

/// Head-averaged, attention-weighted neighbor sum followed by ELU.
pub fn attention_aggregate(z: &StEmbedding, alpha: &[EdgeScores], params: &GatParams) -> Result<StEmbedding> {
    if alpha.len() != params.heads() {
        return Err(Error::shape(
            "attention_aggregate",
            format!("{} weight sets for {} heads", alpha.len(), params.heads()),
        ));
    }
    params.check(Some(z.z.cols()))?;
    let n = z.n_rows();
    let first = &alpha[0];
    if first.n_nodes() != n || alpha.iter().any(|a| a.offsets != first.offsets || a.neighbors != first.neighbors) {
        return Err(Error::shape("attention_aggregate", "weights do not match the embedding's graph"));
    }
    let mut dst = Vec::with_capacity(first.neighbors.len());
    for i in 0..n {
        dst.extend(std::iter::repeat(i).take(first.offsets[i + 1] - first.offsets[i]));
    }
    let edges = EdgeIndex {
        n_nodes: n,
        copies: 1,
        src: first.neighbors.clone(),
        dst: dst.into(),
        offsets: first.offsets.clone(),
    };
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape)?;
    let zv = tape.constant(z.z.clone())?;
    let mut wz = Vec::with_capacity(alpha.len());
    let mut av = Vec::with_capacity(alpha.len());
    for (k, a) in alpha.iter().enumerate() {
        wz.push(vars.transform(&mut tape, k, zv)?);
        av.push(tape.constant(DenseArray::matrix(a.values.len(), 1, a.values.clone())?)?);
    }
    let out = vars.aggregate(&mut tape, &wz, &av, &edges)?;
    Ok(StEmbedding::new(tape.value(out).clone(), Stage::Spatial))
}
