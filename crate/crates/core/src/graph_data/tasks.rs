use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{TrafficGraph, WindowBatch};
use crate::error::{Error, Result};

/// A source city's graph together with its pool of training windows.
#[derive(Clone, Copy, Debug)]
pub struct CityPool<'a> {
    pub graph: &'a TrafficGraph,
    pub windows: &'a WindowBatch,
}

/// One meta-learning task: disjoint support and query windows from a
/// single city.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTask {
    /// Position of the city in the pool list given to the sampler.
    pub city: usize,
    pub city_id: String,
    pub support: WindowBatch,
    pub query: WindowBatch,
    pub support_idx: Vec<usize>,
    pub query_idx: Vec<usize>,
}

/// Draws `n_tasks` tasks. Each picks a city uniformly among those with at
/// least `k_support + k_query` windows, then that many distinct windows:
/// the first `k_support` form the support set, the rest the query set.
pub fn sample_tasks(
    cities: &[CityPool<'_>],
    k_support: usize,
    k_query: usize,
    n_tasks: usize,
    seed: u64,
) -> Result<Vec<EpisodeTask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_tasks_with(cities, k_support, k_query, n_tasks, &mut rng)
}

pub(crate) fn sample_tasks_with<R: Rng>(
    cities: &[CityPool<'_>],
    k_support: usize,
    k_query: usize,
    n_tasks: usize,
    rng: &mut R,
) -> Result<Vec<EpisodeTask>> {
    if k_support == 0 || k_query == 0 {
        return Err(Error::Sampling("support and query sizes must be positive".into()));
    }
    let need = k_support + k_query;
    let eligible: Vec<usize> = (0..cities.len())
        .filter(|&c| cities[c].windows.len() >= need)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Sampling(format!(
            "no city has the {need} windows a task needs"
        )));
    }
    let mut tasks = Vec::with_capacity(n_tasks);
    for _ in 0..n_tasks {
        let city = eligible[rng.random_range(0..eligible.len())];
        let pool = cities[city].windows;
        let picked = sample(rng, pool.len(), need).into_vec();
        let (support_idx, query_idx) = (picked[..k_support].to_vec(), picked[k_support..].to_vec());
        tasks.push(EpisodeTask {
            city,
            city_id: cities[city].graph.city_id.clone(),
            support: pool.select(&support_idx),
            query: pool.select(&query_idx),
            support_idx,
            query_idx,
        });
    }
    Ok(tasks)
}
