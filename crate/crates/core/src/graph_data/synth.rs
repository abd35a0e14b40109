//! Deterministic synthetic cities.
//!
//! Each city is a random geometric graph on the unit square. Speeds are a
//! per-node base level minus a 24-hour sinusoid minus a congestion field,
//! plus Gaussian noise. The congestion field receives random point
//! injections and evolves as `c(t+1) = decay · P c(t) + injections(t+1)`
//! with `P` the row-normalized adjacency, so jams spread to neighbors one
//! step later. All cities share these dynamics; they differ in graph,
//! diurnal phase and wave timing.

use std::f64::consts::TAU;

use chrono::NaiveDateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SpeedSeries, TrafficGraph};
use crate::diffcore::DenseArray;
use crate::error::{Error, Result};

const MAX_GRAPH_ATTEMPTS: usize = 20;
const MIN_SPEED: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub city_id: String,
    pub n_nodes: usize,
    pub n_days: usize,
    pub interval_minutes: u32,
    pub seed: u64,
    pub base_speed: f64,
    pub diurnal_amplitude: f64,
    /// Expected congestion injections per node per day.
    pub wave_rate: f64,
    pub wave_magnitude: f64,
    /// Fraction of congestion retained per step.
    pub wave_decay: f64,
    pub noise_std: f64,
    /// Connection radius of the geometric graph on the unit square.
    pub radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            city_id: "synth".into(),
            n_nodes: 20,
            n_days: 7,
            interval_minutes: 5,
            seed: 0,
            base_speed: 60.0,
            diurnal_amplitude: 12.0,
            wave_rate: 6.0,
            wave_magnitude: 15.0,
            wave_decay: 0.92,
            noise_std: 1.0,
            radius: 0.4,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let positive = self.n_nodes > 0
            && self.n_days > 0
            && self.interval_minutes > 0
            && self.base_speed > 0.0
            && self.radius > 0.0;
        let non_negative = self.diurnal_amplitude >= 0.0
            && self.wave_rate >= 0.0
            && self.wave_magnitude >= 0.0
            && self.noise_std >= 0.0
            && (0.0..=1.0).contains(&self.wave_decay);
        if !(positive && non_negative) || 1440 % self.interval_minutes != 0 {
            return Err(Error::Synth(format!("invalid configuration for `{}`", self.city_id)));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.n_days * (1440 / self.interval_minutes) as usize
    }
}

/// A generated city plus the latent quantities behind its speeds.
#[derive(Clone, Debug)]
pub struct SynthCity {
    pub graph: TrafficGraph,
    pub series: SpeedSeries,
    /// `T × n` congestion field.
    pub congestion: DenseArray,
    /// `(t, node)` of every injection.
    pub injections: Vec<(usize, usize)>,
    pub phase: Vec<f64>,
    pub base: Vec<f64>,
}

pub fn start_time() -> NaiveDateTime {
    NaiveDateTime::parse_from_str("2012-03-01T00:00:00", "%Y-%m-%dT%H:%M:%S").unwrap()
}

fn geometric_graph(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<TrafficGraph> {
    for _ in 0..MAX_GRAPH_ATTEMPTS {
        let pts: Vec<(f64, f64)> = (0..cfg.n_nodes)
            .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let mut edges = Vec::new();
        for i in 0..cfg.n_nodes {
            for j in i + 1..cfg.n_nodes {
                let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
                if d < cfg.radius {
                    edges.push((i, j, (-(d / cfg.radius).powi(2)).exp()));
                }
            }
        }
        let g = TrafficGraph::new(cfg.city_id.clone(), cfg.n_nodes, edges, cfg.interval_minutes)?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::Synth(format!(
        "`{}`: radius {} gave a disconnected graph {MAX_GRAPH_ATTEMPTS} times",
        cfg.city_id, cfg.radius
    )))
}

/// One congestion step without injections: `decay · P c`.
pub fn diffuse(transition: &DenseArray, decay: f64, c: &[f64]) -> Vec<f64> {
    let n = c.len();
    (0..n)
        .map(|i| decay * transition.row(i).iter().zip(c).map(|(p, x)| p * x).sum::<f64>())
        .collect()
}

pub fn synth_city(cfg: &SynthConfig) -> Result<SynthCity> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let graph = geometric_graph(cfg, &mut rng)?;
    let n = cfg.n_nodes;
    let t_len = cfg.steps();

    let city_phase = rng.random_range(0.0..TAU);
    let phase: Vec<f64> = (0..n).map(|_| city_phase + rng.random_range(-0.3..0.3)).collect();
    let base: Vec<f64> = (0..n)
        .map(|_| cfg.base_speed * rng.random_range(0.85..1.15))
        .collect();

    let p = graph.transition();
    let inject_p = cfg.wave_rate * cfg.interval_minutes as f64 / 1440.0;
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).unwrap());

    let mut congestion = Vec::with_capacity(t_len * n);
    let mut speeds = Vec::with_capacity(t_len * n);
    let mut injections = Vec::new();
    let mut c = vec![0.0; n];
    for t in 0..t_len {
        if t > 0 {
            c = diffuse(&p, cfg.wave_decay, &c);
        }
        if inject_p > 0.0 {
            for (i, ci) in c.iter_mut().enumerate() {
                if rng.random::<f64>() < inject_p {
                    *ci += cfg.wave_magnitude;
                    injections.push((t, i));
                }
            }
        }
        let day_frac = (t as f64 * cfg.interval_minutes as f64) / 1440.0;
        for i in 0..n {
            let mut v = base[i] - cfg.diurnal_amplitude * (TAU * day_frac + phase[i]).sin() - c[i];
            if let Some(d) = &noise {
                v += d.sample(&mut rng);
            }
            speeds.push(v.max(MIN_SPEED));
        }
        congestion.extend_from_slice(&c);
    }

    let series = SpeedSeries::new(
        cfg.city_id.clone(),
        (0..n).map(|i| format!("{}-{i}", cfg.city_id)).collect(),
        DenseArray::matrix(t_len, n, speeds)?,
        start_time(),
        cfg.interval_minutes,
    )?;
    Ok(SynthCity {
        graph,
        series,
        congestion: DenseArray::matrix(t_len, n, congestion)?,
        injections,
        phase,
        base,
    })
}

/// Generates every city. Seeds must be distinct.
pub fn synth_cities(configs: &[SynthConfig]) -> Result<Vec<(TrafficGraph, SpeedSeries)>> {
    for (i, a) in configs.iter().enumerate() {
        if configs[..i].iter().any(|b| b.seed == a.seed) {
            return Err(Error::Synth(format!("seed {} used by more than one city", a.seed)));
        }
    }
    configs
        .iter()
        .map(|c| synth_city(c).map(|s| (s.graph, s.series)))
        .collect()
}
