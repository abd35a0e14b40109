//! Masked error metrics, per-horizon evaluation on the target test split,
//! and the tables written for experiments and λ sweeps.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DenseArray, ParamSet};
use crate::error::{Error, Result};
use crate::graph_data::{Normalizer, TrafficGraph, WindowBatch};
use crate::meta_trainer::{adapt_to_split, train_variant, MetaConfig, Model, TrainState, TransferData, Variant};

/// Horizons reported when none are requested: 1, 3 and 6 steps.
pub const DEFAULT_HORIZONS: [usize; 3] = [1, 3, 6];

fn residuals<'a>(truth: &'a [f64], pred: &'a [f64], mask: &'a [bool]) -> Result<impl Iterator<Item = f64> + 'a> {
    if truth.len() != pred.len() || mask.len() != truth.len() {
        return Err(Error::shape(
            "metric",
            format!("truth {}, pred {}, mask {}", truth.len(), pred.len(), mask.len()),
        ));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Metric("every entry is masked".into()));
    }
    Ok(truth.iter().zip(pred).zip(mask).filter(|(_, &m)| m).map(|((t, p), _)| t - p))
}

/// Mean absolute error over the entries whose mask is set.
pub fn mae(truth: &[f64], pred: &[f64], mask: &[bool]) -> Result<f64> {
    let (s, n) = residuals(truth, pred, mask)?.fold((0.0, 0usize), |(s, n), r| (s + r.abs(), n + 1));
    Ok(s / n as f64)
}

/// Root mean squared error over the entries whose mask is set.
pub fn rmse(truth: &[f64], pred: &[f64], mask: &[bool]) -> Result<f64> {
    let (s, n) = residuals(truth, pred, mask)?.fold((0.0, 0usize), |(s, n), r| (s + r * r, n + 1));
    Ok((s / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    /// 1-based prediction step.
    pub step: usize,
    pub minutes: u64,
    /// In the original speed units.
    pub mae: f64,
    pub rmse: f64,
    /// In Z-scored units.
    pub mae_norm: f64,
    pub rmse_norm: f64,
    /// Scored entries.
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub rows: Vec<HorizonRow>,
    /// The evaluated parameters never saw target data.
    pub zero_shot: bool,
}

impl HorizonReport {
    /// Mean of the per-horizon raw MAE.
    pub fn mean_mae(&self) -> f64 {
        self.rows.iter().map(|r| r.mae).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_rmse(&self) -> f64 {
        self.rows.iter().map(|r| r.rmse).sum::<f64>() / self.rows.len() as f64
    }

    /// `horizon_min,mae,rmse,n`, raw units.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon_min,mae,rmse,n\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.minutes, r.mae, r.rmse, r.n));
        }
        s
    }
}

/// Scores normalized predictions `(B·n) × M` (encoder row order) against
/// the targets of `windows` at each requested horizon.
pub fn evaluate_predictions(
    pred: &DenseArray,
    windows: &WindowBatch,
    normalizer: &Normalizer,
    horizons: &[usize],
    interval_minutes: u32,
) -> Result<HorizonReport> {
    let n = windows.n_nodes;
    let m = windows.horizon;
    if pred.dims2() != (windows.len() * n, m) {
        return Err(Error::shape(
            "evaluate_horizons",
            format!("predictions {:?} for {} windows of {n} nodes and {m} steps", pred.dims2(), windows.len()),
        ));
    }
    if normalizer.n_nodes() != n {
        return Err(Error::shape("evaluate_horizons", format!("normalizer for {} nodes, windows have {n}", normalizer.n_nodes())));
    }
    if horizons.is_empty() {
        return Err(Error::Metric("no horizons requested".into()));
    }
    let mut rows = Vec::with_capacity(horizons.len());
    for &h in horizons {
        if h == 0 || h > m {
            return Err(Error::Metric(format!("horizon {h} outside 1..={m}")));
        }
        let step = h - 1;
        let count = windows.len() * n;
        let (mut t_raw, mut p_raw) = (Vec::with_capacity(count), Vec::with_capacity(count));
        let (mut t_norm, mut p_norm) = (Vec::with_capacity(count), Vec::with_capacity(count));
        let mut mask = Vec::with_capacity(count);
        for b in 0..windows.len() {
            for node in 0..n {
                let (t, p) = (windows.target(b, step, node), pred.get2(b * n + node, step));
                t_norm.push(t);
                p_norm.push(p);
                t_raw.push(normalizer.denormalize(node, t));
                p_raw.push(normalizer.denormalize(node, p));
                mask.push(windows.target_is_valid(b, step, node));
            }
        }
        rows.push(HorizonRow {
            step: h,
            minutes: h as u64 * interval_minutes as u64,
            mae: mae(&t_raw, &p_raw, &mask)?,
            rmse: rmse(&t_raw, &p_raw, &mask)?,
            mae_norm: mae(&t_norm, &p_norm, &mask)?,
            rmse_norm: rmse(&t_norm, &p_norm, &mask)?,
            n: mask.iter().filter(|&&v| v).count(),
        });
    }
    Ok(HorizonReport { rows, zero_shot: false })
}

/// Predicts every test window with `theta`, de-normalizes, and scores each
/// requested horizon.
pub fn evaluate_horizons(
    theta: &ParamSet,
    model: &Model,
    test: &WindowBatch,
    graph: &TrafficGraph,
    normalizer: &Normalizer,
    horizons: &[usize],
) -> Result<HorizonReport> {
    if let Some(&h) = horizons.iter().find(|&&h| h == 0 || h > test.horizon) {
        return Err(Error::Metric(format!("horizon {h} outside 1..={}", test.horizon)));
    }
    let pred = model.predict(theta, test, graph)?;
    evaluate_predictions(&pred, test, normalizer, horizons, graph.interval_minutes)
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> MeanStd {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedTable {
    pub seed: u64,
    pub report: HorizonReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonStats {
    pub minutes: u64,
    pub mae: MeanStd,
    pub rmse: MeanStd,
}

/// JSON experiment summary for one variant over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedTable>,
    pub horizons: Vec<HorizonStats>,
    pub mean_mae: MeanStd,
    pub mean_rmse: MeanStd,
}

pub fn summarize(variant: &str, runs: Vec<SeedTable>) -> Result<ExperimentSummary> {
    let first = runs.first().ok_or_else(|| Error::Metric("no runs to summarize".into()))?;
    let minutes: Vec<u64> = first.report.rows.iter().map(|r| r.minutes).collect();
    if runs.iter().any(|r| r.report.rows.iter().map(|x| x.minutes).ne(minutes.iter().copied())) {
        return Err(Error::Metric("runs report different horizons".into()));
    }
    let horizons = (0..minutes.len())
        .map(|k| {
            let col = |f: fn(&HorizonRow) -> f64| runs.iter().map(|r| f(&r.report.rows[k])).collect::<Vec<_>>();
            HorizonStats {
                minutes: minutes[k],
                mae: MeanStd::of(&col(|r| r.mae)),
                rmse: MeanStd::of(&col(|r| r.rmse)),
            }
        })
        .collect();
    Ok(ExperimentSummary {
        variant: variant.to_string(),
        seeds: runs.iter().map(|r| r.seed).collect(),
        mean_mae: MeanStd::of(&runs.iter().map(|r| r.report.mean_mae()).collect::<Vec<_>>()),
        mean_rmse: MeanStd::of(&runs.iter().map(|r| r.report.mean_rmse()).collect::<Vec<_>>()),
        horizons,
        per_seed: runs,
    })
}

/// Adapts the initialization `theta` on the target's adaptation split
/// (none for a zero-shot target) and scores it on the test windows.
pub fn adapt_and_evaluate(
    theta: ParamSet,
    variant: Variant,
    data: &TransferData,
    model: &Model,
    cfg: &MetaConfig,
    horizons: &[usize],
) -> Result<SeedTable> {
    let mut state = TrainState::new(model, cfg)?;
    if !theta.same_layout(&state.theta) {
        return Err(Error::shape("adapt_and_evaluate", "parameters do not match the model configuration"));
    }
    state.theta = theta;
    let t = &data.target;
    adapt_to_split(&mut state, t, model, cfg)?;
    let mut report = evaluate_horizons(&state.theta, model, &t.test, &t.graph, &t.normalizer, horizons)?;
    report.zero_shot = t.is_zero_shot() && variant != Variant::TargetOnly;
    Ok(SeedTable { seed: cfg.seed, report })
}

/// Trains `variant` for one seed and scores the adapted parameters on the
/// target test windows.
pub fn run_and_evaluate(
    variant: Variant,
    data: &TransferData,
    model: &Model,
    cfg: &MetaConfig,
    horizons: &[usize],
) -> Result<SeedTable> {
    let state = train_variant(variant, data, model, cfg)?;
    adapt_and_evaluate(state.theta, variant, data, model, cfg, horizons)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    /// Seed-averaged mean-over-horizons errors.
    pub mae: f64,
    pub rmse: f64,
    pub per_seed: Vec<SeedTable>,
}

/// One full-variant run per `λ` and seed.
pub fn lambda_sweep(
    values: &[f64],
    seeds: &[u64],
    data: &TransferData,
    model: &Model,
    cfg: &MetaConfig,
    horizons: &[usize],
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::contract("the λ list is empty"));
    }
    if seeds.is_empty() {
        return Err(Error::contract("the seed list is empty"));
    }
    values
        .iter()
        .map(|&lambda| {
            let per_seed = seeds
                .iter()
                .map(|&seed| {
                    let c = MetaConfig { lambda, seed, ..cfg.clone() };
                    run_and_evaluate(Variant::Full, data, model, &c, horizons)
                })
                .collect::<Result<Vec<_>>>()?;
            let k = per_seed.len() as f64;
            Ok(SweepPoint {
                lambda,
                mae: per_seed.iter().map(|s| s.report.mean_mae()).sum::<f64>() / k,
                rmse: per_seed.iter().map(|s| s.report.mean_rmse()).sum::<f64>() / k,
                per_seed,
            })
        })
        .collect()
}

/// `lambda,mae,rmse`.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("lambda,mae,rmse\n");
    for p in points {
        s.push_str(&format!("{},{},{}\n", p.lambda, p.mae, p.rmse));
    }
    s
}
