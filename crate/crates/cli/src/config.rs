//! Experiment configuration: one JSON document, optionally patched with
//! dotted `key=value` overrides before it is parsed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use stda_core::eval_metrics::DEFAULT_HORIZONS;
use stda_core::graph_data::{load_city_dir, synth_city, SpeedSeries, SynthConfig, TrafficGraph};
use stda_core::meta_trainer::{DataConfig, MetaConfig, Model, Variant};
use stda_core::st_embedding::EncoderConfig;

use crate::error::{CliError, Result};

/// A city either read from a directory in the three-file format or
/// generated on the fly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CitySpec {
    Path(PathBuf),
    Synth(SynthConfig),
}

impl CitySpec {
    /// Relative paths are taken from the directory of the config file.
    fn rebase(&mut self, base: &Path) {
        if let CitySpec::Path(p) = self {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn resolve(&self) -> Result<(TrafficGraph, SpeedSeries)> {
        match self {
            CitySpec::Path(p) => {
                if !p.is_dir() {
                    return Err(CliError::Resolve {
                        path: p.clone(),
                        reason: "no such directory".into(),
                    });
                }
                load_city_dir(p).map_err(|e| CliError::Resolve {
                    path: p.clone(),
                    reason: e.to_string(),
                })
            }
            CitySpec::Synth(c) => {
                let city = synth_city(c)?;
                Ok((city.graph, city.series))
            }
        }
    }

    fn same_city(&self, other: &CitySpec) -> bool {
        match (self, other) {
            (CitySpec::Path(a), CitySpec::Path(b)) => match (a.canonicalize(), b.canonicalize()) {
                (Ok(a), Ok(b)) => a == b,
                _ => a == b,
            },
            (CitySpec::Synth(a), CitySpec::Synth(b)) => a.city_id == b.city_id,
            _ => false,
        }
    }
}

fn default_variant() -> Variant {
    Variant::Full
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_horizons() -> Vec<usize> {
    DEFAULT_HORIZONS.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub sources: Vec<CitySpec>,
    pub target: CitySpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// 1-based prediction steps to report.
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

/// Sets `path` (dot separated; numeric segments index arrays) inside
/// `doc`. The value is parsed as JSON when possible and kept as a string
/// otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("override key `{key}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut at = doc;
    for seg in key.split('.') {
        if at.is_null() {
            *at = Value::Object(Default::default());
        }
        at = match at {
            Value::Array(items) => {
                let i: usize = seg
                    .parse()
                    .map_err(|_| CliError::Config(format!("`{key}`: `{seg}` is not an array index")))?;
                let len = items.len();
                items
                    .get_mut(i)
                    .ok_or_else(|| CliError::Config(format!("`{key}`: index {i} past {len} elements")))?
            }
            Value::Object(map) => map.entry(seg.to_string()).or_insert(Value::Null),
            _ => return Err(CliError::Config(format!("`{key}`: `{seg}` descends into a scalar"))),
        };
    }
    *at = value;
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path`, applies `overrides` in order, parses and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut doc: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.sources.iter_mut().for_each(|s| s.rebase(base));
        cfg.target.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> Model {
        Model {
            encoder: self.encoder.clone(),
            horizon: self.data.horizon,
        }
    }

    /// Meta-training settings for one seed.
    pub fn meta_for(&self, seed: u64) -> MetaConfig {
        MetaConfig {
            seed,
            ..self.meta.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return bad("the seed list is empty".into());
        }
        if self.horizons.is_empty() {
            return bad("the horizon list is empty".into());
        }
        if let Some(h) = self.horizons.iter().find(|&&h| h == 0 || h > self.data.horizon) {
            return bad(format!("horizon {h} outside 1..={}", self.data.horizon));
        }
        if self.data.history == 0 || self.data.horizon == 0 || self.data.source_stride == 0 || self.data.test_stride == 0 {
            return bad("history, horizon and strides must be positive".into());
        }
        if self.variant.uses_sources() && self.sources.is_empty() {
            return bad(format!("variant `{}` needs at least one source city", self.variant));
        }
        if self.sources.iter().any(|s| s.same_city(&self.target)) {
            return bad("the target city is also listed as a source".into());
        }
        self.meta.validate()?;
        self.model().validate()?;
        Ok(())
    }
}
