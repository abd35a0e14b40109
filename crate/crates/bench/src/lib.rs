//! Fixtures shared by the benchmarks: a synthetic source/target family at
//! the desk-scale experiment size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stda_core::graph_data::{sample_tasks, synth_cities, CityPool, EpisodeTask, SynthConfig, TrafficGraph};
use stda_core::meta_trainer::{prepare_transfer, DataConfig, MetaConfig, Model, TargetBatch, TransferData};
use stda_core::st_embedding::EncoderConfig;

pub fn transfer_data(n_nodes: usize) -> TransferData {
    let configs: Vec<SynthConfig> = (0..4)
        .map(|i| SynthConfig {
            city_id: format!("city{i}"),
            n_nodes,
            n_days: 4,
            seed: 100 + i as u64,
            ..SynthConfig::default()
        })
        .collect();
    let cities = synth_cities(&configs).expect("valid synthetic configuration");
    prepare_transfer(&cities[..3], &cities[3], &DataConfig::default()).expect("enough windows")
}

pub fn model(hidden: usize, heads: usize) -> Model {
    Model {
        encoder: EncoderConfig {
            hidden,
            heads,
            ..EncoderConfig::default()
        },
        horizon: 6,
    }
}

pub fn meta_config() -> MetaConfig {
    MetaConfig {
        k_support: 4,
        k_query: 4,
        target_batch: 4,
        ..MetaConfig::default()
    }
}

/// One task batch and the graph of each task.
pub fn tasks<'a>(data: &'a TransferData, cfg: &MetaConfig, seed: u64) -> (Vec<EpisodeTask>, Vec<&'a TrafficGraph>) {
    let pools: Vec<CityPool<'a>> = data
        .sources()
        .iter()
        .map(|c| CityPool {
            graph: &c.graph,
            windows: &c.windows,
        })
        .collect();
    let tasks = sample_tasks(&pools, cfg.k_support, cfg.k_query, cfg.task_batch, seed).expect("enough windows");
    let graphs = tasks.iter().map(|t| pools[t.city].graph).collect();
    (tasks, graphs)
}

pub fn target_batch(data: &TransferData, size: usize, seed: u64) -> TargetBatch<'_> {
    TargetBatch::sample(&data.target, size, &mut ChaCha8Rng::seed_from_u64(seed)).expect("adaptation windows")
}
