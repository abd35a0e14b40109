use std::collections::BTreeSet;
use std::path::Path;

use log::{info, warn};
use serde::Serialize;
use stda_core::diffcore::checkpoint;
use stda_core::eval_metrics::{
    adapt_and_evaluate, lambda_sweep, run_and_evaluate, summarize, sweep_csv, ExperimentSummary, HorizonReport,
    SeedTable, SweepPoint,
};
use stda_core::graph_data::{write_city, SpeedSeries, TrafficGraph};
use stda_core::meta_trainer::{prepare_transfer, train_variant, TransferData, Variant};

use crate::config::{CitySpec, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::output::Output;

/// Resolves the configured cities and cuts them into windows. Source
/// cities are only read when `use_sources` is set.
pub fn load_transfer(cfg: &ExperimentConfig, use_sources: bool) -> Result<(TransferData, Vec<String>)> {
    let sources: Vec<(TrafficGraph, SpeedSeries)> = if use_sources {
        cfg.sources.iter().map(CitySpec::resolve).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let target = cfg.target.resolve()?;
    let ids = sources.iter().map(|(g, _)| g.city_id.clone()).collect();
    let data = prepare_transfer(&sources, &target, &cfg.data)?;
    if data.target.is_zero_shot() {
        warn!("target `{}` has no adaptation days: results are zero-shot", target.0.city_id);
    }
    Ok((data, ids))
}

/// Writes every synthetic city to `cities/<city_id>/`, plus a copy of the
/// configuration that reads them back from disk.
pub fn synth(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let mut seen = BTreeSet::new();
    let mut on_disk = cfg.clone();
    let specs = on_disk.sources.iter_mut().chain(std::iter::once(&mut on_disk.target));
    for spec in specs {
        let CitySpec::Synth(sc) = &*spec else {
            info!("skipping a city given by path");
            continue;
        };
        if !seen.insert(sc.city_id.clone()) {
            return Err(CliError::Config(format!("synthetic city id `{}` is used twice", sc.city_id)));
        }
        let (graph, series) = spec.resolve()?;
        let rel = format!("cities/{}", graph.city_id);
        write_city(&out.path(&rel), &graph, &series)?;
        for f in ["speed.csv", "adjacency.csv", "meta.json"] {
            out.record(&format!("{rel}/{f}"));
        }
        info!("wrote `{}`: {} nodes, {} steps", graph.city_id, graph.n_nodes(), series.len());
        *spec = CitySpec::Path(rel.into());
    }
    on_disk.output_dir = "runs".into();
    out.write_json("experiment.json", &on_disk)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct StepLine {
    step: usize,
    mean_query_loss: f64,
    l_st: f64,
    l_p: f64,
}

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub steps: usize,
    pub best_step: Option<usize>,
    /// Mean query loss (prediction plus weighted domain term) per step.
    pub query_loss: Vec<f64>,
    pub source_reads: usize,
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub sources_used: Vec<String>,
    pub runs: Vec<RunRecord>,
    pub metrics: ExperimentSummary,
}

fn write_report(out: &mut Output, stem: &str, report: &HorizonReport) -> Result<()> {
    out.write(&format!("{stem}.csv"), report.to_csv())?;
    out.write_json(&format!("{stem}.json"), report)?;
    Ok(())
}

/// Trains the configured variant for every seed. Each `seed_<s>/` holds the
/// selected initialization (`init.ckpt`), the per-step log and the report
/// after target adaptation.
pub fn train(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    if !cfg.variant.uses_sources() && !cfg.sources.is_empty() {
        info!("variant `{}` ignores the {} configured source cities", cfg.variant, cfg.sources.len());
    }
    let (data, sources_used) = load_transfer(cfg, cfg.variant.uses_sources())?;
    let model = cfg.model();
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    let mut tables = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let meta = cfg.meta_for(seed);
        let state = train_variant(cfg.variant, &data, &model, &meta)?;
        let dir = format!("seed_{seed}");
        std::fs::create_dir_all(out.path(&dir))?;
        checkpoint::save(&state.theta, &out.path(&format!("{dir}/init.ckpt")))?;
        out.record(&format!("{dir}/init.ckpt"));
        let mut log = String::new();
        for l in &state.history {
            let line = StepLine {
                step: l.step,
                mean_query_loss: l.mean_query_loss,
                l_st: l.l_st,
                l_p: l.l_p,
            };
            log.push_str(&serde_json::to_string(&line).map_err(stda_core::Error::from)?);
            log.push('\n');
        }
        out.write(&format!("{dir}/steps.jsonl"), log)?;
        let table = adapt_and_evaluate(state.theta.clone(), cfg.variant, &data, &model, &meta, &cfg.horizons)?;
        write_report(out, &format!("{dir}/report"), &table.report)?;
        info!(
            "seed {seed}: {} steps, selected step {:?}, test MAE {:.4}",
            state.step,
            state.best_step(),
            table.report.mean_mae()
        );
        runs.push(RunRecord {
            seed,
            steps: state.step,
            best_step: state.best_step(),
            query_loss: state.history.iter().map(|l| l.mean_query_loss).collect(),
            source_reads: data.source_reads(),
        });
        tables.push(table);
    }
    if !cfg.variant.uses_sources() {
        info!("audit: variant `{}` read source windows {} times", cfg.variant, data.source_reads());
    }
    let summary = TrainSummary {
        variant: cfg.variant,
        sources_used,
        runs,
        metrics: summarize(cfg.variant.name(), tables)?,
    };
    out.write_json("summary.json", &summary)?;
    Ok(())
}

/// Adapts a saved initialization on the target's adaptation split and
/// scores it.
pub fn eval(cfg: &ExperimentConfig, checkpoint_path: &Path, seed: Option<u64>, out: &mut Output) -> Result<()> {
    let theta = checkpoint::load(checkpoint_path).map_err(|e| CliError::Resolve {
        path: checkpoint_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    // Only the target is needed; sources matter for the normalizer only
    // when the target is zero-shot.
    let (data, _) = load_transfer(cfg, cfg.data.adapt_days == 0)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let table = adapt_and_evaluate(theta, cfg.variant, &data, &cfg.model(), &cfg.meta_for(seed), &cfg.horizons)?;
    info!("seed {seed}: test MAE {:.4}{}", table.report.mean_mae(), if table.report.zero_shot { " (zero-shot)" } else { "" });
    write_report(out, "eval_report", &table.report)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct AblationSummary {
    pub seeds: Vec<u64>,
    pub variants: Vec<ExperimentSummary>,
}

/// Every variant on the same seeds: `ablation.csv` has one row per
/// variant, seed and horizon.
pub fn ablate(cfg: &ExperimentConfig, out: &mut Output) -> Result<()> {
    let (data, _) = load_transfer(cfg, true)?;
    let model = cfg.model();
    info!("variants share seeds {:?}", cfg.seeds);
    let mut csv = String::from("variant,seed,horizon_min,mae,rmse,n\n");
    let mut variants = Vec::with_capacity(Variant::ALL.len());
    for v in Variant::ALL {
        let mut tables: Vec<SeedTable> = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let t = run_and_evaluate(v, &data, &model, &cfg.meta_for(seed), &cfg.horizons)?;
            info!("{v} seed {seed}: test MAE {:.4}", t.report.mean_mae());
            for r in &t.report.rows {
                csv.push_str(&format!("{v},{seed},{},{},{},{}\n", r.minutes, r.mae, r.rmse, r.n));
            }
            tables.push(t);
        }
        variants.push(summarize(v.name(), tables)?);
    }
    out.write("ablation.csv", csv)?;
    out.write_json(
        "ablation.json",
        &AblationSummary {
            seeds: cfg.seeds.clone(),
            variants,
        },
    )?;
    Ok(())
}

/// Full-variant runs over `lambdas` on every seed.
pub fn sweep(cfg: &ExperimentConfig, lambdas: &[f64], out: &mut Output) -> Result<()> {
    if lambdas.is_empty() {
        return Err(CliError::Usage("the λ list is empty".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(CliError::Usage(format!("λ = {l} is not a non-negative number")));
    }
    let (data, _) = load_transfer(cfg, true)?;
    let points: Vec<SweepPoint> = lambda_sweep(lambdas, &cfg.seeds, &data, &cfg.model(), &cfg.meta, &cfg.horizons)?;
    for p in &points {
        info!("λ = {}: test MAE {:.4}", p.lambda, p.mae);
    }
    out.write("sweep.csv", sweep_csv(&points))?;
    out.write_json("sweep.json", &points)?;
    Ok(())
}
