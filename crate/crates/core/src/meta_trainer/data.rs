use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_data::{
    fit_normalizer, make_windows, target_split, Normalizer, SpeedSeries, TimeRange, TrafficGraph, WindowBatch,
    STD_EPSILON,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// History steps `H`.
    pub history: usize,
    /// Predicted steps `M`.
    pub horizon: usize,
    /// Leading target days available for adaptation; the rest is test.
    pub adapt_days: usize,
    pub source_stride: usize,
    pub test_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            history: 12,
            horizon: 6,
            adapt_days: 3,
            source_stride: 1,
            test_stride: 1,
        }
    }
}

/// A source city: Z-scored over its full range and cut into windows.
#[derive(Clone, Debug)]
pub struct CityData {
    pub graph: TrafficGraph,
    pub normalizer: Normalizer,
    pub windows: WindowBatch,
}

#[derive(Clone, Debug)]
pub struct TargetData {
    pub graph: TrafficGraph,
    /// Fit on the adaptation range, or on pooled source readings when
    /// there is none.
    pub normalizer: Normalizer,
    /// `None` for zero-shot transfer.
    pub adapt: Option<WindowBatch>,
    pub test: WindowBatch,
    pub adapt_range: TimeRange,
    pub test_range: TimeRange,
    pub interval_minutes: u32,
}

impl TargetData {
    pub fn adapt_windows(&self) -> Result<&WindowBatch> {
        self.adapt
            .as_ref()
            .ok_or_else(|| Error::EmptyBatch("the target city has no adaptation range".into()))
    }

    pub fn is_zero_shot(&self) -> bool {
        self.adapt.is_none()
    }
}

/// Everything a variant trains and evaluates on. Source cities sit behind
/// an access counter so that target-only training can prove it never
/// touched them.
#[derive(Debug)]
pub struct TransferData {
    sources: Vec<CityData>,
    pub target: TargetData,
    source_reads: AtomicUsize,
}

impl TransferData {
    pub fn sources(&self) -> &[CityData] {
        self.source_reads.fetch_add(1, Ordering::Relaxed);
        &self.sources
    }

    pub fn source_reads(&self) -> usize {
        self.source_reads.load(Ordering::Relaxed)
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }
}

/// Pooled mean and standard deviation of every valid source reading,
/// repeated for each target node.
fn pooled_normalizer(sources: &[(TrafficGraph, SpeedSeries)], n_nodes: usize) -> Result<Normalizer> {
    let vals: Vec<f64> = sources
        .iter()
        .flat_map(|(_, s)| s.values().data().iter().zip(s.valid()).filter(|(_, &ok)| ok).map(|(&v, _)| v))
        .collect();
    if vals.is_empty() {
        return Err(Error::Split("zero-shot transfer needs valid source readings".into()));
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt();
    Ok(Normalizer {
        mean: vec![m; n_nodes],
        std: vec![sd.max(STD_EPSILON); n_nodes],
    })
}

pub fn prepare_transfer(
    sources: &[(TrafficGraph, SpeedSeries)],
    target: &(TrafficGraph, SpeedSeries),
    cfg: &DataConfig,
) -> Result<TransferData> {
    let (tg, ts) = target;
    if sources.iter().any(|(g, _)| g.city_id == tg.city_id) {
        return Err(Error::contract(format!("target `{}` is also a source city", tg.city_id)));
    }
    for (g, s) in sources.iter().chain(std::iter::once(target)) {
        if g.n_nodes() != s.n_nodes() {
            return Err(Error::shape(
                "prepare_transfer",
                format!("`{}`: graph has {} nodes, series {}", g.city_id, g.n_nodes(), s.n_nodes()),
            ));
        }
    }
    let mut cities = Vec::with_capacity(sources.len());
    for (g, s) in sources {
        let normalizer = fit_normalizer(s, s.full_range())?;
        let z = normalizer.apply(s)?;
        let windows = make_windows(&z, cfg.history, cfg.horizon, z.full_range(), cfg.source_stride)?;
        cities.push(CityData {
            graph: g.clone(),
            normalizer,
            windows,
        });
    }

    let (adapt_range, test_range) = target_split(ts, cfg.adapt_days)?;
    let normalizer = if adapt_range.is_empty() {
        pooled_normalizer(sources, ts.n_nodes())?
    } else {
        fit_normalizer(ts, adapt_range)?
    };
    let z = normalizer.apply(ts)?;
    let adapt = if adapt_range.is_empty() {
        None
    } else {
        Some(make_windows(&z, cfg.history, cfg.horizon, adapt_range, 1)?)
    };
    let test = make_windows(&z, cfg.history, cfg.horizon, test_range, cfg.test_stride)?;
    Ok(TransferData {
        sources: cities,
        target: TargetData {
            graph: tg.clone(),
            normalizer,
            adapt,
            test,
            adapt_range,
            test_range,
            interval_minutes: ts.interval_minutes,
        },
        source_reads: AtomicUsize::new(0),
    })
}
