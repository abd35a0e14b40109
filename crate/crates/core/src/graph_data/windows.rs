use super::series::{SpeedSeries, TimeRange};
use crate::diffcore::DenseArray;
use crate::error::{Error, Result};

/// Sliding windows: `H` history steps followed by `M` target steps, for
/// every node. Inputs are `B × H × n`, targets `B × M × n`, and
/// `target_valid` flags the target entries that carry a real reading.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub history: usize,
    pub horizon: usize,
    pub n_nodes: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    target_valid: Vec<bool>,
    /// Time index of the first history step of each window.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn inputs(&self) -> DenseArray {
        DenseArray::new(vec![self.len(), self.history, self.n_nodes], self.inputs.clone())
            .expect("window batch is non-empty")
    }

    pub fn targets(&self) -> DenseArray {
        DenseArray::new(vec![self.len(), self.horizon, self.n_nodes], self.targets.clone())
            .expect("window batch is non-empty")
    }

    pub fn input(&self, b: usize, step: usize, node: usize) -> f64 {
        self.inputs[(b * self.history + step) * self.n_nodes + node]
    }

    pub fn target(&self, b: usize, step: usize, node: usize) -> f64 {
        self.targets[(b * self.horizon + step) * self.n_nodes + node]
    }

    pub fn target_is_valid(&self, b: usize, step: usize, node: usize) -> bool {
        self.target_valid[(b * self.horizon + step) * self.n_nodes + node]
    }

    pub fn valid_targets(&self) -> usize {
        self.target_valid.iter().filter(|&&v| v).count()
    }

    /// Windows at the given positions, in that order.
    pub fn select(&self, idx: &[usize]) -> WindowBatch {
        let (hn, mn) = (self.history * self.n_nodes, self.horizon * self.n_nodes);
        let mut out = WindowBatch {
            history: self.history,
            horizon: self.horizon,
            n_nodes: self.n_nodes,
            inputs: Vec::with_capacity(idx.len() * hn),
            targets: Vec::with_capacity(idx.len() * mn),
            target_valid: Vec::with_capacity(idx.len() * mn),
            starts: Vec::with_capacity(idx.len()),
        };
        for &b in idx {
            out.inputs.extend_from_slice(&self.inputs[b * hn..(b + 1) * hn]);
            out.targets.extend_from_slice(&self.targets[b * mn..(b + 1) * mn]);
            out.target_valid
                .extend_from_slice(&self.target_valid[b * mn..(b + 1) * mn]);
            out.starts.push(self.starts[b]);
        }
        out
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &WindowBatch) -> Result<WindowBatch> {
        if (self.history, self.horizon, self.n_nodes) != (other.history, other.horizon, other.n_nodes) {
            return Err(Error::shape(
                "WindowBatch::concat",
                format!(
                    "{}+{} steps on {} nodes vs {}+{} on {}",
                    self.history, self.horizon, self.n_nodes, other.history, other.horizon, other.n_nodes
                ),
            ));
        }
        let mut out = self.clone();
        out.inputs.extend_from_slice(&other.inputs);
        out.targets.extend_from_slice(&other.targets);
        out.target_valid.extend_from_slice(&other.target_valid);
        out.starts.extend_from_slice(&other.starts);
        Ok(out)
    }

    /// Contiguous sub-batch `from..to`.
    pub fn slice(&self, from: usize, to: usize) -> WindowBatch {
        let idx: Vec<usize> = (from..to.min(self.len())).collect();
        self.select(&idx)
    }

    /// History for each step as `(B·n) × 1` column blocks, window-major and
    /// node-minor, which is the row layout of the encoder.
    pub fn step_inputs(&self, step: usize) -> Vec<f64> {
        let mut col = Vec::with_capacity(self.len() * self.n_nodes);
        for b in 0..self.len() {
            let base = (b * self.history + step) * self.n_nodes;
            col.extend_from_slice(&self.inputs[base..base + self.n_nodes]);
        }
        col
    }

    /// Targets as a `(B·n) × M` matrix in encoder row order, with the
    /// matching validity mask (1.0 valid, 0.0 missing).
    pub fn target_rows(&self) -> (DenseArray, DenseArray) {
        let rows = self.len() * self.n_nodes;
        let m = self.horizon;
        let mut t = vec![0.0; rows * m];
        let mut mask = vec![0.0; rows * m];
        for b in 0..self.len() {
            for step in 0..m {
                for node in 0..self.n_nodes {
                    let r = b * self.n_nodes + node;
                    t[r * m + step] = self.target(b, step, node);
                    if self.target_is_valid(b, step, node) {
                        mask[r * m + step] = 1.0;
                    }
                }
            }
        }
        (
            DenseArray::matrix_unchecked(rows, m, t),
            DenseArray::matrix_unchecked(rows, m, mask),
        )
    }
}

/// Number of windows [`make_windows`] yields.
pub fn window_count(len: usize, history: usize, horizon: usize, stride: usize) -> usize {
    if stride == 0 || len < history + horizon {
        0
    } else {
        (len - history - horizon) / stride + 1
    }
}

/// Windows `[t−H+1 ..= t] → [t+1 ..= t+M]` for every admissible `t` inside
/// `range`, stepping by `stride`.
pub fn make_windows(
    series: &SpeedSeries,
    history: usize,
    horizon: usize,
    range: TimeRange,
    stride: usize,
) -> Result<WindowBatch> {
    if history == 0 || horizon == 0 || stride == 0 {
        return Err(Error::contract("history, horizon and stride must be positive"));
    }
    if range.end > series.len() {
        return Err(Error::contract(format!(
            "range end {} beyond series length {}",
            range.end,
            series.len()
        )));
    }
    let count = window_count(range.len(), history, horizon, stride);
    if count == 0 {
        return Err(Error::EmptyBatch(format!(
            "range of {} steps is shorter than {history} + {horizon}",
            range.len()
        )));
    }
    let n = series.n_nodes();
    let values = series.values().data();
    let valid = series.valid();
    let mut batch = WindowBatch {
        history,
        horizon,
        n_nodes: n,
        inputs: Vec::with_capacity(count * history * n),
        targets: Vec::with_capacity(count * horizon * n),
        target_valid: Vec::with_capacity(count * horizon * n),
        starts: Vec::with_capacity(count),
    };
    for k in 0..count {
        let s = range.start + k * stride;
        batch.inputs.extend_from_slice(&values[s * n..(s + history) * n]);
        let (ts, te) = ((s + history) * n, (s + history + horizon) * n);
        batch.targets.extend_from_slice(&values[ts..te]);
        batch.target_valid.extend_from_slice(&valid[ts..te]);
        batch.starts.push(s);
    }
    Ok(batch)
}
