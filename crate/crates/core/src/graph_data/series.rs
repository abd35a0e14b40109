use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::diffcore::DenseArray;
use crate::error::{Error, Result};

/// Half-open range of time-step indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeRange {
    pub start: usize,
    pub end: usize,
}

impl TimeRange {
    pub fn new(start: usize, end: usize) -> Self {
        TimeRange { start, end: end.max(start) }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// `T × n` speed readings on an even time grid. Non-positive and
/// non-finite readings are treated as missing and flagged in `valid`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeedSeries {
    pub city_id: String,
    pub node_ids: Vec<String>,
    values: DenseArray,
    valid: Vec<bool>,
    pub start: NaiveDateTime,
    pub interval_minutes: u32,
}

impl SpeedSeries {
    pub fn new(
        city_id: impl Into<String>,
        node_ids: Vec<String>,
        values: DenseArray,
        start: NaiveDateTime,
        interval_minutes: u32,
    ) -> Result<Self> {
        if values.shape().len() != 2 || values.cols() != node_ids.len() {
            return Err(Error::shape(
                "SpeedSeries::new",
                format!("values {:?} vs {} node ids", values.shape(), node_ids.len()),
            ));
        }
        if interval_minutes == 0 {
            return Err(Error::contract("interval_minutes must be positive"));
        }
        let valid = values.data().iter().map(|&v| v.is_finite() && v > 0.0).collect();
        Ok(SpeedSeries {
            city_id: city_id.into(),
            node_ids,
            values,
            valid,
            start,
            interval_minutes,
        })
    }

    pub(crate) fn with_values(&self, values: DenseArray) -> SpeedSeries {
        SpeedSeries {
            city_id: self.city_id.clone(),
            node_ids: self.node_ids.clone(),
            values,
            valid: self.valid.clone(),
            start: self.start,
            interval_minutes: self.interval_minutes,
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, t: usize, node: usize) -> f64 {
        self.values.data()[t * self.n_nodes() + node]
    }

    pub fn is_valid(&self, t: usize, node: usize) -> bool {
        self.valid[t * self.n_nodes() + node]
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::minutes(t as i64 * self.interval_minutes as i64)
    }

    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.interval_minutes) as usize
    }

    pub fn full_range(&self) -> TimeRange {
        TimeRange::new(0, self.len())
    }

    /// Copy with node columns reordered so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> SpeedSeries {
        let n = self.n_nodes();
        let mut data = vec![0.0; self.values.len()];
        let mut valid = vec![false; self.valid.len()];
        let mut ids = vec![String::new(); n];
        for (i, &p) in perm.iter().enumerate() {
            ids[p] = self.node_ids[i].clone();
            for t in 0..self.len() {
                data[t * n + p] = self.values.data()[t * n + i];
                valid[t * n + p] = self.valid[t * n + i];
            }
        }
        SpeedSeries {
            city_id: self.city_id.clone(),
            node_ids: ids,
            values: DenseArray::matrix_unchecked(self.len(), n, data),
            valid,
            start: self.start,
            interval_minutes: self.interval_minutes,
        }
    }
}

/// Splits a target-city series into the first `adapt_days` days for
/// adaptation and the remainder for testing.
pub fn target_split(series: &SpeedSeries, adapt_days: usize) -> Result<(TimeRange, TimeRange)> {
    let cut = adapt_days * series.steps_per_day();
    if cut >= series.len() {
        return Err(Error::Split(format!(
            "{} steps do not span more than {adapt_days} day(s)",
            series.len()
        )));
    }
    Ok((TimeRange::new(0, cut), TimeRange::new(cut, series.len())))
}

pub const STD_EPSILON: f64 = 1e-8;

/// Per-node Z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-node mean and population standard deviation over valid readings in
/// `train_range` only.
pub fn fit_normalizer(series: &SpeedSeries, train_range: TimeRange) -> Result<Normalizer> {
    if train_range.is_empty() || train_range.end > series.len() {
        return Err(Error::contract(format!(
            "train range {}..{} invalid for {} steps",
            train_range.start,
            train_range.end,
            series.len()
        )));
    }
    let n = series.n_nodes();
    let mut mean = vec![0.0; n];
    let mut std = vec![0.0; n];
    for node in 0..n {
        let vals: Vec<f64> = (train_range.start..train_range.end)
            .filter(|&t| series.is_valid(t, node))
            .map(|t| series.get(t, node))
            .collect();
        if vals.is_empty() {
            log::warn!("{}: node {node} has no valid readings in the training range", series.city_id);
            std[node] = STD_EPSILON;
            continue;
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        let s = var.sqrt();
        mean[node] = m;
        std[node] = if s < STD_EPSILON {
            log::warn!("{}: node {node} is constant over the training range", series.city_id);
            STD_EPSILON
        } else {
            s
        };
    }
    Ok(Normalizer { mean, std })
}

impl Normalizer {
    pub fn n_nodes(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, node: usize, value: f64) -> f64 {
        (value - self.mean[node]) / self.std[node]
    }

    pub fn denormalize(&self, node: usize, value: f64) -> f64 {
        value * self.std[node] + self.mean[node]
    }

    /// Z-scored copy of `series`. Missing readings become 0 (the node mean)
    /// and stay flagged invalid.
    pub fn apply(&self, series: &SpeedSeries) -> Result<SpeedSeries> {
        let n = series.n_nodes();
        if n != self.n_nodes() {
            return Err(Error::shape("Normalizer::apply", format!("{n} nodes vs {}", self.n_nodes())));
        }
        let data = series
            .values()
            .data()
            .iter()
            .zip(series.valid())
            .enumerate()
            .map(|(k, (&v, &ok))| if ok { self.normalize(k % n, v) } else { 0.0 })
            .collect();
        Ok(series.with_values(DenseArray::matrix_unchecked(series.len(), n, data)))
    }

    /// Inverse of [`Normalizer::apply`] on valid readings.
    pub fn invert(&self, series: &SpeedSeries) -> Result<SpeedSeries> {
        let n = series.n_nodes();
        if n != self.n_nodes() {
            return Err(Error::shape("Normalizer::invert", format!("{n} nodes vs {}", self.n_nodes())));
        }
        let data = series
            .values()
            .data()
            .iter()
            .zip(series.valid())
            .enumerate()
            .map(|(k, (&v, &ok))| if ok { self.denormalize(k % n, v) } else { 0.0 })
            .collect();
        Ok(series.with_values(DenseArray::matrix_unchecked(series.len(), n, data)))
    }
}
