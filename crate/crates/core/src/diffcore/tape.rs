//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! Every value on the tape is a dense matrix. A forward pass records one
//! node per primitive application; [`Tape::backward`] walks the nodes in
//! reverse and produces the adjoint of every node. Each primitive checks
//! its output for NaN/Inf and fails with [`Error::NonFinite`] naming itself.

use std::sync::Arc;

use indexmap::IndexMap;

use super::{DenseArray, ParamSet};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Arc<[usize]>),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    Clamp(Var, f64, f64),
    GruGates(Var, Var, Var),
    SpMM(Var, Var, Arc<[usize]>, Arc<[usize]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Elu(..) => "elu",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SoftmaxRows(..) => "softmax",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::GatherRows(..) => "gather_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::Clamp(..) => "clamp",
            Op::GruGates(..) => "gru_gates",
            Op::SpMM(..) => "spmm",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulCol(a, b)
            | Op::SpMM(a, b, ..) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Elu(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::SoftmaxRows(a)
            | Op::SegmentSoftmax(a, _)
            | Op::GatherRows(a, _)
            | Op::SegmentSum(a, _)
            | Op::Clamp(a, ..) => vec![*a],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::GruGates(a, b, c) => vec![*a, *b, *c],
        }
    }
}

struct Node {
    value: DenseArray,
    op: Op,
    /// Some trainable leaf is upstream of this node.
    needs_grad: bool,
}

/// Leaves created from a [`ParamSet`], looked up by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node reached from the differentiated output.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the adjoint of every bound leaf into `params`' gradient buffers.
    /// Leaves the loss does not depend on contribute nothing.
    pub fn accumulate_into(&self, bound: &Bound, params: &mut ParamSet) -> Result<()> {
        for (name, var) in bound.iter() {
            if let Some(g) = self.get(var) {
                params.accumulate_grad(name, g, 1.0)?;
            }
        }
        Ok(())
    }
}

fn check_finite(primitive: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { primitive })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `C = A·B` for row-major data, with either operand optionally read
/// transposed. `m × k` times `k × n` after transposition.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], a_t: bool, b: &[f64], b_t: bool, out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && b.len() == k * n && out.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the m×k, k×n and m×n elements the
    // strides address, and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let value = self.value(v);
        if value.len() != 1 {
            return Err(Error::contract(format!(
                "expected a scalar output, got shape {:?}",
                value.shape()
            )));
        }
        Ok(value.data()[0])
    }

    fn push(&mut self, value: DenseArray, op: Op) -> Result<Var> {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(value, op, needs_grad)
    }

    fn push_node(&mut self, value: DenseArray, op: Op, needs_grad: bool) -> Result<Var> {
        check_finite(op.name(), value.data())?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: DenseArray) -> Result<Var> {
        self.push_node(value, Op::Leaf, false)
    }

    /// Binds every entry of `params` as a leaf.
    pub fn bind(&mut self, params: &ParamSet) -> Result<Bound> {
        let mut vars = IndexMap::with_capacity(params.len());
        for (name, value) in params.iter() {
            let v = self.push_node(value.clone(), Op::Leaf, true)?;
            vars.insert(name.to_string(), v);
        }
        Ok(Bound { vars })
    }

    /// Binds every entry of `params` as a constant, for evaluation passes
    /// that never call [`Tape::backward`].
    pub fn bind_constants(&mut self, params: &ParamSet) -> Result<Bound> {
        let mut vars = IndexMap::with_capacity(params.len());
        for (name, value) in params.iter() {
            let v = self.push_node(value.clone(), Op::Leaf, false)?;
            vars.insert(name.to_string(), v);
        }
        Ok(Bound { vars })
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push(DenseArray::matrix_unchecked(r, c, data), op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_dims(op.name(), a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(DenseArray::matrix_unchecked(r, c, data), op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), false, self.value(b).data(), false, &mut out, m, k, n);
        self.push(DenseArray::matrix_unchecked(m, n, out), Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(DenseArray::matrix_unchecked(c, r, data), Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a (r×c) + b (1×c)`, broadcasting `b` over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((r, c), (br, bc)) = (self.dims(a), self.dims(b));
        if br != 1 || bc != c {
            return Err(Error::shape("add_row", format!("{r}x{c} + {br}x{bc}")));
        }
        let bias = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        self.push(DenseArray::matrix_unchecked(r, c, data), Op::AddRow(a, b))
    }

    /// `a (r×c) ⊙ s (r×1)`, scaling each row of `a`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let ((r, c), (sr, sc)) = (self.dims(a), self.dims(s));
        if sr != r || sc != 1 {
            return Err(Error::shape("mul_col", format!("{r}x{c} * {sr}x{sc}")));
        }
        let scale = self.value(s).data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .zip(scale)
            .flat_map(|(row, &k)| row.iter().map(move |x| x * k))
            .collect();
        self.push(DenseArray::matrix_unchecked(r, c, data), Op::MulCol(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), |x| x + k)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Elu(a), |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(DenseArray::matrix_unchecked(1, 1, vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(DenseArray::matrix_unchecked(1, 1, vec![s]), Op::Mean(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let r = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            DenseArray::matrix_unchecked(r, c, data),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let c = self.dims(first).1;
        let mut data = Vec::new();
        for &p in parts {
            let pc = self.dims(p).1;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("column counts {c} vs {pc}")));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let r = data.len() / c;
        self.push(
            DenseArray::matrix_unchecked(r, c, data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push(DenseArray::matrix_unchecked(r, w, data), Op::SliceCols(a, start))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r}")));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        self.push(
            DenseArray::matrix_unchecked(end - start, c, data),
            Op::SliceRows(a, start),
        )
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(DenseArray::matrix_unchecked(r, c, data), Op::SoftmaxRows(a))
    }

    /// Softmax of a column vector within contiguous segments
    /// `offsets[s]..offsets[s + 1]`.
    pub fn segment_softmax(&mut self, e: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.dims(e);
        if c != 1 || offsets.last() != Some(&r) || offsets.first() != Some(&0) {
            return Err(Error::shape(
                "segment_softmax",
                format!("{r}x{c} with offsets ending at {:?}", offsets.last()),
            ));
        }
        let mut data = self.value(e).data().to_vec();
        for w in offsets.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::contract("segment_softmax: empty segment"));
            }
            softmax_in_place(&mut data[w[0]..w[1]]);
        }
        self.push(
            DenseArray::matrix_unchecked(r, 1, data),
            Op::SegmentSoftmax(e, offsets),
        )
    }

    /// Rows of `a` selected by `index`, in order; repeats allowed.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= r {
                return Err(Error::shape("gather_rows", format!("row {i} of {r}")));
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let n = index.len();
        self.push(DenseArray::matrix_unchecked(n, c, data), Op::GatherRows(a, index))
    }

    /// Sums rows within each segment `offsets[s]..offsets[s + 1]`.
    pub fn segment_sum(&mut self, a: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if offsets.last() != Some(&r) || offsets.first() != Some(&0) {
            return Err(Error::shape("segment_sum", format!("{r} rows vs offsets")));
        }
        let src = self.value(a).data();
        let segs = offsets.len() - 1;
        let mut data = vec![0.0; segs * c];
        for s in 0..segs {
            let out = &mut data[s * c..(s + 1) * c];
            for row in offsets[s]..offsets[s + 1] {
                for (o, x) in out.iter_mut().zip(&src[row * c..(row + 1) * c]) {
                    *o += x;
                }
            }
        }
        self.push(DenseArray::matrix_unchecked(segs, c, data), Op::SegmentSum(a, offsets))
    }

    /// Fused GRU update from gate pre-activations. `gi` and `gh` are
    /// `R × 3d` with blocks `[r | z | n]` holding `x W_i + b_i` and
    /// `h W_h + b_h`; `h` is the `R × d` previous state.
    ///
    /// ```text
    /// r = σ(gi_r + gh_r),  z = σ(gi_z + gh_z)
    /// n = tanh(gi_n + r ∗ gh_n)
    /// h' = (1 − z) ∗ n + z ∗ h
    /// ```
    pub fn gru_gates(&mut self, gi: Var, gh: Var, h: Var) -> Result<Var> {
        let (r, d3) = self.same_dims("gru_gates", gi, gh)?;
        let (hr, d) = self.dims(h);
        if hr != r || d3 != 3 * d {
            return Err(Error::shape("gru_gates", format!("gates {r}x{d3}, state {hr}x{d}")));
        }
        let (a, b, hv) = (self.value(gi).data(), self.value(gh).data(), self.value(h).data());
        let mut out = Vec::with_capacity(r * d);
        for row in 0..r {
            let (a, b) = (&a[row * d3..(row + 1) * d3], &b[row * d3..(row + 1) * d3]);
            for j in 0..d {
                let rg = sigmoid(a[j] + b[j]);
                let zg = sigmoid(a[d + j] + b[d + j]);
                let ng = (a[2 * d + j] + rg * b[2 * d + j]).tanh();
                out.push((1.0 - zg) * ng + zg * hv[row * d + j]);
            }
        }
        self.push(DenseArray::matrix_unchecked(r, d, out), Op::GruGates(gi, gh, h))
    }

    /// Sparse-weighted row sums: output row `s` is
    /// `Σ_{e ∈ offsets[s]..offsets[s+1]} w_e · h[src_e]`, with `w` an
    /// `E × 1` column.
    pub fn spmm(&mut self, w: Var, h: Var, src: Arc<[usize]>, offsets: Arc<[usize]>) -> Result<Var> {
        let (e, wc) = self.dims(w);
        let (r, c) = self.dims(h);
        if wc != 1 || src.len() != e || offsets.first() != Some(&0) || offsets.last() != Some(&e) {
            return Err(Error::shape("spmm", format!("{e}x{wc} weights for {} edges", src.len())));
        }
        if let Some(&bad) = src.iter().find(|&&i| i >= r) {
            return Err(Error::shape("spmm", format!("row {bad} of {r}")));
        }
        let (wv, hv) = (self.value(w).data(), self.value(h).data());
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * c];
        for s in 0..segs {
            let o = &mut out[s * c..(s + 1) * c];
            for k in offsets[s]..offsets[s + 1] {
                let (wk, row) = (wv[k], &hv[src[k] * c..(src[k] + 1) * c]);
                o.iter_mut().zip(row).for_each(|(o, x)| *o += wk * x);
            }
        }
        self.push(DenseArray::matrix_unchecked(segs, c, out), Op::SpMM(w, h, src, offsets))
    }

    /// Adjoints of all nodes with respect to the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            for (var, delta) in contributions {
                if !self.needs_grad(var) {
                    continue;
                }
                check_finite(node.op.name(), &delta)?;
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let y = node.value.data();
        let val = |v: Var| self.value(v).data();
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ((m, k), n) = (self.dims(*a), self.dims(*b).1);
                let (av, bv) = (val(*a), val(*b));
                let mut res = Vec::with_capacity(2);
                if self.needs_grad(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(g, false, bv, true, &mut da, m, n, k);
                    res.push((*a, da));
                }
                if self.needs_grad(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm(av, true, g, false, &mut db, k, m, n);
                    res.push((*b, db));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*a, d)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                let db = g.iter().zip(av).map(|(g, a)| g * a).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(a, b) => {
                let c = self.dims(*b).1;
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
                vec![(*a, g.to_vec()), (*b, db)]
            }
            Op::MulCol(a, s) => {
                let c = self.dims(*a).1;
                let (av, sv) = (val(*a), val(*s));
                let mut da = Vec::with_capacity(g.len());
                let mut ds = Vec::with_capacity(sv.len());
                for ((grow, arow), &k) in g.chunks(c).zip(av.chunks(c)).zip(sv) {
                    da.extend(grow.iter().map(|x| x * k));
                    ds.push(grow.iter().zip(arow).map(|(x, a)| x * a).sum());
                }
                vec![(*a, da), (*s, ds)]
            }
            Op::Scale(a, k) => vec![(*a, g.iter().map(|x| x * k).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect())],
            Op::Tanh(a) => vec![(*a, g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect())],
            Op::LeakyRelu(a, slope) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                vec![(*a, d)]
            }
            Op::Elu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .zip(y)
                    .map(|((g, &x), &out)| if x > 0.0 { *g } else { g * (out + 1.0) })
                    .collect();
                vec![(*a, d)]
            }
            Op::Log(a) => vec![(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect())],
            Op::Exp(a) => vec![(*a, g.iter().zip(y).map(|(g, e)| g * e).collect())],
            Op::Sqrt(a) => {
                // subgradient 0 at the origin
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(g, &s)| if s > 0.0 { 0.5 * g / s } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::Clamp(a, lo, hi) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, x)| if x >= lo && x <= hi { *g } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Mean(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::ConcatCols(parts) => {
                let c = node.value.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (pr, pc) = self.dims(p);
                    let mut d = Vec::with_capacity(pr * pc);
                    for i in 0..pr {
                        d.extend_from_slice(&g[i * c + offset..i * c + offset + pc]);
                    }
                    offset += pc;
                    res.push((p, d));
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.value(p).len();
                    res.push((p, g[offset..offset + n].to_vec()));
                    offset += n;
                }
                res
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims(*a);
                let w = node.value.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![(*a, d)]
            }
            Op::SliceRows(a, start) => {
                let c = self.dims(*a).1;
                let mut d = vec![0.0; self.value(*a).len()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                vec![(*a, d)]
            }
            Op::SoftmaxRows(a) => {
                let c = self.dims(*a).1;
                let mut d = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(c).zip(y.chunks(c)) {
                    softmax_backward(grow, yrow, &mut d);
                }
                vec![(*a, d)]
            }
            Op::SegmentSoftmax(a, offsets) => {
                let mut d = Vec::with_capacity(g.len());
                for w in offsets.windows(2) {
                    softmax_backward(&g[w[0]..w[1]], &y[w[0]..w[1]], &mut d);
                }
                vec![(*a, d)]
            }
            Op::GatherRows(a, index) => {
                let c = self.dims(*a).1;
                let mut d = vec![0.0; self.value(*a).len()];
                for (k, &i) in index.iter().enumerate() {
                    for (o, x) in d[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *o += x;
                    }
                }
                vec![(*a, d)]
            }
            Op::SegmentSum(a, offsets) => {
                let c = self.dims(*a).1;
                let mut d = vec![0.0; self.value(*a).len()];
                for (s, w) in offsets.windows(2).enumerate() {
                    for row in w[0]..w[1] {
                        d[row * c..(row + 1) * c].copy_from_slice(&g[s * c..(s + 1) * c]);
                    }
                }
                vec![(*a, d)]
            }
            Op::GruGates(gi, gh, h) => {
                let (r, d) = self.dims(*h);
                let d3 = 3 * d;
                let (a, b, hv) = (val(*gi), val(*gh), val(*h));
                let mut dgi = vec![0.0; r * d3];
                let mut dgh = vec![0.0; r * d3];
                let mut dh = vec![0.0; r * d];
                for row in 0..r {
                    let (a, b) = (&a[row * d3..(row + 1) * d3], &b[row * d3..(row + 1) * d3]);
                    let (di, dg) = (&mut dgi[row * d3..(row + 1) * d3], &mut dgh[row * d3..(row + 1) * d3]);
                    for j in 0..d {
                        let rg = sigmoid(a[j] + b[j]);
                        let zg = sigmoid(a[d + j] + b[d + j]);
                        let ng = (a[2 * d + j] + rg * b[2 * d + j]).tanh();
                        let (gj, hj) = (g[row * d + j], hv[row * d + j]);
                        dh[row * d + j] = gj * zg;
                        let dpre_n = gj * (1.0 - zg) * (1.0 - ng * ng);
                        let dpre_z = gj * (hj - ng) * zg * (1.0 - zg);
                        let dpre_r = dpre_n * b[2 * d + j] * rg * (1.0 - rg);
                        di[j] = dpre_r;
                        dg[j] = dpre_r;
                        di[d + j] = dpre_z;
                        dg[d + j] = dpre_z;
                        di[2 * d + j] = dpre_n;
                        dg[2 * d + j] = dpre_n * rg;
                    }
                }
                vec![(*gi, dgi), (*gh, dgh), (*h, dh)]
            }
            Op::SpMM(w, h, src, offsets) => {
                let c = self.dims(*h).1;
                let (wv, hv) = (val(*w), val(*h));
                let mut dw = vec![0.0; wv.len()];
                let mut dh = vec![0.0; hv.len()];
                for (s, seg) in offsets.windows(2).enumerate() {
                    let grow = &g[s * c..(s + 1) * c];
                    for k in seg[0]..seg[1] {
                        let j = src[k];
                        dw[k] = grow.iter().zip(&hv[j * c..(j + 1) * c]).map(|(x, y)| x * y).sum();
                        dh[j * c..(j + 1) * c].iter_mut().zip(grow).for_each(|(d, x)| *d += wv[k] * x);
                    }
                }
                vec![(*w, dw), (*h, dh)]
            }
        };
        Ok(out)
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward(g: &[f64], y: &[f64], out: &mut Vec<f64>) {
    let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
    out.extend(g.iter().zip(y).map(|(g, y)| y * (g - dot)));
}

/// Runs `f` on a fresh tape with `params` bound as leaves, then adds the
/// gradient of the returned scalar into `params`' gradient buffers.
///
/// Gradients accumulate; callers zero them between independent steps.
pub fn forward_and_grad<F>(params: &mut ParamSet, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let out = f(&mut tape, &bound)?;
    let value = tape.scalar(out)?;
    let grads = tape.backward(out)?;
    grads.accumulate_into(&bound, params)?;
    Ok(value)
}

/// Evaluates `f` without computing gradients.
pub fn forward<F>(params: &ParamSet, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let out = f(&mut tape, &bound)?;
    tape.scalar(out)
}
