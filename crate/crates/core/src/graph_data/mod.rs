//! Road graphs, speed series, normalization, windowing, task sampling and
//! the synthetic city generator.

mod graph;
pub mod io;
mod series;
pub mod synth;
mod tasks;
mod windows;

pub use graph::{EdgeIndex, TrafficGraph};
pub use io::{load_city, load_city_dir, write_city, CityMeta};
pub use series::{fit_normalizer, target_split, Normalizer, SpeedSeries, TimeRange, STD_EPSILON};
pub use synth::{synth_cities, synth_city, SynthCity, SynthConfig};
pub use tasks::{sample_tasks, CityPool, EpisodeTask};
pub(crate) use tasks::sample_tasks_with;
pub use windows::{make_windows, window_count, WindowBatch};
