use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{TargetData, TransferData};
use super::model::Model;
use super::{MamlOrder, MetaConfig, Variant};
use crate::diffcore::{adam_step, sgd_step, DenseArray, OptimizerState, ParamSet, Tape};
use crate::domain_adversarial::{adversarial_round, init_discriminator, DiscVars, DomainBatch};
use crate::error::{Error, Result};
use crate::graph_data::{sample_tasks_with, CityPool, EpisodeTask, TrafficGraph, WindowBatch};

// Independent random streams per seed, so that every variant starts from
// the same initialization and, where it samples tasks, sees the same ones.
const STREAM_INIT: u64 = 0;
const STREAM_DISC: u64 = 1;
const STREAM_TASKS: u64 = 2;
const STREAM_TARGET: u64 = 3;
const STREAM_ADAPT: u64 = 4;

/// Relative probe size of the finite-difference Hessian-vector products.
const HVP_SCALE: f64 = 1e-5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Mean over the step's tasks of `λ·l_st + l_p`.
    pub mean_query_loss: f64,
    pub l_st: f64,
    pub l_p: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
struct Selection {
    score: f64,
    step: usize,
    theta: ParamSet,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub theta: ParamSet,
    pub d_params: ParamSet,
    pub meta_opt: OptimizerState,
    /// Invariant: equals `history.len()`.
    pub step: usize,
    pub history: Vec<StepLog>,
    /// Discriminator loss before each adversarial round.
    pub disc_history: Vec<f64>,
    /// Loss on each adaptation minibatch before its update.
    pub adapt_history: Vec<f64>,
    best: Option<Selection>,
    since_best: usize,
}

impl TrainState {
    /// Initial state for `cfg.seed`.
    pub fn new(model: &Model, cfg: &MetaConfig) -> Result<Self> {
        cfg.validate()?;
        let theta = model.init(&mut stream(cfg.seed, STREAM_INIT))?;
        let d_params = init_discriminator(&mut stream(cfg.seed, STREAM_DISC), model.encoder.hidden)?;
        Ok(TrainState {
            theta,
            d_params,
            meta_opt: OptimizerState::adam(cfg.beta)?,
            step: 0,
            history: Vec::new(),
            disc_history: Vec::new(),
            adapt_history: Vec::new(),
            best: None,
            since_best: 0,
        })
    }

    /// Step whose parameters [`Self::restore_best`] would pick.
    pub fn best_step(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.step)
    }

    /// Appends `log` and tracks the parameters with the lowest rolling mean
    /// prediction loss. `evaluated` are the parameters the logged losses
    /// were measured at.
    fn record(&mut self, log: StepLog, evaluated: &ParamSet, cfg: &MetaConfig) {
        self.history.push(log);
        self.step += 1;
        let w = cfg.selection_window;
        if self.history.len() < w {
            return;
        }
        let score = self.history[self.history.len() - w..].iter().map(|l| l.l_p).sum::<f64>() / w as f64;
        if self.best.as_ref().map_or(true, |b| score < b.score) {
            self.best = Some(Selection {
                score,
                step: self.step,
                theta: evaluated.clone(),
            });
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
    }

    fn stagnated(&self, cfg: &MetaConfig) -> bool {
        self.since_best >= cfg.patience
    }

    /// Replaces `theta` by the selected parameters, if any were selected.
    pub fn restore_best(&mut self) {
        if let Some(b) = &self.best {
            self.theta = b.theta.clone();
            self.theta.zero_grads();
        }
    }
}

/// Target-city windows drawn for the domain terms of one step.
#[derive(Clone, Debug)]
pub struct TargetBatch<'a> {
    pub windows: WindowBatch,
    pub graph: &'a TrafficGraph,
}

impl<'a> TargetBatch<'a> {
    pub fn sample<R: Rng>(target: &'a TargetData, size: usize, rng: &mut R) -> Result<Self> {
        let pool = target.adapt_windows()?;
        let idx = sample(rng, pool.len(), size.min(pool.len())).into_vec();
        Ok(TargetBatch {
            windows: pool.select(&idx),
            graph: &target.graph,
        })
    }
}

/// `steps` plain gradient steps at rate `alpha` on a copy of `theta`.
/// `grad` adds the loss gradient into the buffers of the parameters it is
/// given; gradients are zeroed before each call. `theta` is not touched.
pub fn inner_adapt_with<F>(theta: &ParamSet, alpha: f64, steps: usize, mut grad: F) -> Result<ParamSet>
where
    F: FnMut(&mut ParamSet) -> Result<f64>,
{
    if steps == 0 {
        return Err(Error::contract("inner adaptation needs at least one step"));
    }
    let mut fast = theta.clone();
    for _ in 0..steps {
        fast.zero_grads();
        grad(&mut fast)?;
        sgd_step(&mut fast, alpha)?;
    }
    fast.zero_grads();
    Ok(fast)
}

/// [`inner_adapt_with`] on the prediction loss of the task's support set.
pub fn inner_adapt(
    theta: &ParamSet,
    task: &EpisodeTask,
    graph: &TrafficGraph,
    model: &Model,
    cfg: &MetaConfig,
) -> Result<ParamSet> {
    inner_adapt_with(theta, cfg.alpha, cfg.inner_steps, |p| {
        model.accumulate_task_grad(p, &task.support, graph, cfg.loss_form)
    })
}

/// Result of evaluating one task's outer objective.
struct TaskOutcome {
    grad: Vec<f64>,
    l_p: f64,
    l_st: f64,
    z_eval: DenseArray,
    z_target: Option<DenseArray>,
}

/// `l_p` on `batch` plus, when `target` is given, `λ·l_st` on the target
/// windows against the frozen discriminator, all at `theta`. Returns the
/// flat gradient with respect to `theta`.
fn outer_objective(
    theta: &ParamSet,
    batch: &WindowBatch,
    graph: &TrafficGraph,
    target: Option<&TargetBatch<'_>>,
    d_params: &ParamSet,
    model: &Model,
    cfg: &MetaConfig,
) -> Result<TaskOutcome> {
    let mut tape = Tape::new();
    let bound = tape.bind(theta)?;
    let vars = model.bind(&mut tape, &bound)?;
    let (lp, zq) = vars.loss(&mut tape, batch, graph, cfg.loss_form)?;
    let (total, lst, zt) = match target {
        Some(tb) => {
            let zt = vars.embed(&mut tape, &tb.windows, tb.graph)?;
            let disc = DiscVars::frozen(&mut tape, d_params)?;
            let lst = disc.st_domain_loss(&mut tape, zt)?;
            let weighted = tape.scale(lst, cfg.lambda)?;
            (tape.add(lp, weighted)?, Some(lst), Some(zt))
        }
        None => (lp, None, None),
    };
    let grads = tape.backward(total)?;
    let mut p = theta.clone();
    p.zero_grads();
    grads.accumulate_into(&bound, &mut p)?;
    Ok(TaskOutcome {
        grad: p.flat_grads(),
        l_p: tape.scalar(lp)?,
        l_st: lst.map(|v| tape.scalar(v)).transpose()?.unwrap_or(0.0),
        z_eval: tape.value(zq).clone(),
        z_target: zt.map(|v| tape.value(v).clone()),
    })
}

fn support_grad(theta: &ParamSet, task: &EpisodeTask, graph: &TrafficGraph, model: &Model, cfg: &MetaConfig) -> Result<Vec<f64>> {
    let mut p = theta.clone();
    p.zero_grads();
    model.accumulate_task_grad(&mut p, &task.support, graph, cfg.loss_form)?;
    Ok(p.flat_grads())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Support-loss Hessian at `theta` times `v`, by central differences of
/// analytic gradients.
fn hessian_vector(
    theta: &ParamSet,
    v: &[f64],
    task: &EpisodeTask,
    graph: &TrafficGraph,
    model: &Model,
    cfg: &MetaConfig,
) -> Result<Vec<f64>> {
    let nv = norm(v);
    if nv == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let base = theta.flat_values();
    let eps = HVP_SCALE * (1.0 + norm(&base)) / nv;
    let mut probe = theta.clone();
    let shifted = |sign: f64| base.iter().zip(v).map(|(b, d)| b + sign * eps * d).collect::<Vec<_>>();
    probe.set_flat_values(&shifted(1.0))?;
    let plus = support_grad(&probe, task, graph, model, cfg)?;
    probe.set_flat_values(&shifted(-1.0))?;
    let minus = support_grad(&probe, task, graph, model, cfg)?;
    Ok(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * eps)).collect())
}

/// Meta-gradient of one task's outer objective with respect to `theta`,
/// along with the losses and embeddings seen on the way.
fn task_meta_gradient(
    theta: &ParamSet,
    task: &EpisodeTask,
    graph: &TrafficGraph,
    target: Option<&TargetBatch<'_>>,
    d_params: &ParamSet,
    model: &Model,
    cfg: &MetaConfig,
) -> Result<TaskOutcome> {
    // Points the inner loop started each step from, kept for the
    // second-order pass.
    let mut path = Vec::with_capacity(cfg.inner_steps);
    let mut fast = theta.clone();
    for _ in 0..cfg.inner_steps {
        if cfg.maml_order == MamlOrder::Second {
            path.push(fast.clone());
        }
        fast = inner_adapt_with(&fast, cfg.alpha, 1, |p| {
            model.accumulate_task_grad(p, &task.support, graph, cfg.loss_form)
        })?;
    }
    let mut out = outer_objective(&fast, &task.query, graph, target, d_params, model, cfg)?;
    // θ_{j+1} = θ_j − α∇L_S(θ_j), so the adjoint picks up (I − α H_S(θ_j)).
    for point in path.iter().rev() {
        let hv = hessian_vector(point, &out.grad, task, graph, model, cfg)?;
        out.grad.iter_mut().zip(&hv).for_each(|(g, h)| *g -= cfg.alpha * h);
    }
    Ok(out)
}

/// Mean meta-gradient over `tasks`, reduced in task order. `graphs[i]` is
/// the graph of `tasks[i]`.
pub fn meta_gradient(
    theta: &ParamSet,
    tasks: &[EpisodeTask],
    graphs: &[&TrafficGraph],
    target: Option<&TargetBatch<'_>>,
    d_params: &ParamSet,
    model: &Model,
    cfg: &MetaConfig,
) -> Result<Vec<f64>> {
    Ok(reduce_tasks(theta, tasks, graphs, target, d_params, model, cfg, task_meta_gradient)?.0)
}

struct Reduced {
    l_p: f64,
    l_st: f64,
    z_eval: Vec<DenseArray>,
    z_target: Vec<DenseArray>,
}

type TaskFn = fn(
    &ParamSet,
    &EpisodeTask,
    &TrafficGraph,
    Option<&TargetBatch<'_>>,
    &ParamSet,
    &Model,
    &MetaConfig,
) -> Result<TaskOutcome>;

#[allow(clippy::too_many_arguments)]
fn reduce_tasks(
    theta: &ParamSet,
    tasks: &[EpisodeTask],
    graphs: &[&TrafficGraph],
    target: Option<&TargetBatch<'_>>,
    d_params: &ParamSet,
    model: &Model,
    cfg: &MetaConfig,
    per_task: TaskFn,
) -> Result<(Vec<f64>, Reduced)> {
    if tasks.len() != cfg.task_batch {
        return Err(Error::contract(format!(
            "{} tasks given, the configuration asks for {}",
            tasks.len(),
            cfg.task_batch
        )));
    }
    if graphs.len() != tasks.len() {
        return Err(Error::contract("one graph per task is required"));
    }
    let target = if cfg.lambda > 0.0 { target } else { None };
    let mut sum = vec![0.0; theta.num_values()];
    let mut red = Reduced {
        l_p: 0.0,
        l_st: 0.0,
        z_eval: Vec::with_capacity(tasks.len()),
        z_target: Vec::new(),
    };
    for (task, graph) in tasks.iter().zip(graphs) {
        let o = per_task(theta, task, graph, target, d_params, model, cfg)?;
        sum.iter_mut().zip(&o.grad).for_each(|(s, g)| *s += g);
        red.l_p += o.l_p;
        red.l_st += o.l_st;
        red.z_eval.push(o.z_eval);
        red.z_target.extend(o.z_target);
    }
    let t = tasks.len() as f64;
    sum.iter_mut().for_each(|s| *s /= t);
    red.l_p /= t;
    red.l_st /= t;
    Ok((sum, red))
}

fn set_grads(params: &mut ParamSet, flat: &[f64]) -> Result<()> {
    params.zero_grads();
    let layout: Vec<(String, usize)> = params.iter().map(|(n, v)| (n.to_string(), v.len())).collect();
    let mut at = 0;
    for (name, len) in layout {
        params.accumulate_grad(&name, &flat[at..at + len], 1.0)?;
        at += len;
    }
    Ok(())
}

fn stack_rows(parts: &[DenseArray]) -> Result<DenseArray> {
    let cols = parts.first().map_or(0, |p| p.cols());
    let rows = parts.iter().map(DenseArray::rows).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    DenseArray::matrix(rows, cols, data)
}

/// Shared tail of every training step: one adaptive-moment update with the
/// reduced gradient, one discriminator round when domain terms were
/// computed, then logging and model selection.
fn finish_step(state: &mut TrainState, grad: &[f64], red: Reduced, cfg: &MetaConfig, started: Instant) -> Result<StepLog> {
    let evaluated = state.theta.clone();
    set_grads(&mut state.theta, grad)?;
    adam_step(&mut state.theta, &mut state.meta_opt)?;
    state.theta.zero_grads();
    if !red.z_target.is_empty() {
        let batch = DomainBatch::new(stack_rows(&red.z_eval)?, stack_rows(&red.z_target)?)?;
        let d_loss = adversarial_round(&batch, &mut state.d_params, cfg.lr_d)?;
        state.disc_history.push(d_loss);
    }
    let log = StepLog {
        step: state.step + 1,
        mean_query_loss: red.l_p + cfg.lambda * red.l_st,
        l_st: red.l_st,
        l_p: red.l_p,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    state.record(log.clone(), &evaluated, cfg);
    Ok(log)
}

/// One meta-update: adapt on each task's support set, score the query set
/// (plus the weighted domain term) at the adapted parameters, average the
/// meta-gradients in task order and take one adaptive-moment step at `β`.
/// The discriminator then plays one round against the query and target
/// embeddings.
pub fn meta_step(
    state: &mut TrainState,
    tasks: &[EpisodeTask],
    graphs: &[&TrafficGraph],
    target: Option<&TargetBatch<'_>>,
    model: &Model,
    cfg: &MetaConfig,
) -> Result<StepLog> {
    let started = Instant::now();
    let (grad, red) = reduce_tasks(
        &state.theta,
        tasks,
        graphs,
        target,
        &state.d_params,
        model,
        cfg,
        task_meta_gradient,
    )?;
    finish_step(state, &grad, red, cfg, started)
}

fn pooled_task(
    theta: &ParamSet,
    task: &EpisodeTask,
    graph: &TrafficGraph,
    target: Option<&TargetBatch<'_>>,
    d_params: &ParamSet,
    model: &Model,
    cfg: &MetaConfig,
) -> Result<TaskOutcome> {
    let all = task.support.concat(&task.query)?;
    outer_objective(theta, &all, graph, target, d_params, model, cfg)
}

/// Joint-training step: each task's support and query windows are scored
/// together at `theta` itself, with no inner adaptation.
pub fn pooled_step(
    state: &mut TrainState,
    tasks: &[EpisodeTask],
    graphs: &[&TrafficGraph],
    target: Option<&TargetBatch<'_>>,
    model: &Model,
    cfg: &MetaConfig,
) -> Result<StepLog> {
    let started = Instant::now();
    let (grad, red) = reduce_tasks(&state.theta, tasks, graphs, target, &state.d_params, model, cfg, pooled_task)?;
    finish_step(state, &grad, red, cfg, started)
}

/// One adaptive-moment step on the prediction loss of a target minibatch.
pub fn target_only_step(
    state: &mut TrainState,
    batch: &WindowBatch,
    graph: &TrafficGraph,
    model: &Model,
    cfg: &MetaConfig,
) -> Result<StepLog> {
    let started = Instant::now();
    let cfg0 = MetaConfig { lambda: 0.0, ..cfg.clone() };
    let o = outer_objective(&state.theta, batch, graph, None, &state.d_params, model, &cfg0)?;
    let red = Reduced {
        l_p: o.l_p,
        l_st: 0.0,
        z_eval: vec![],
        z_target: vec![],
    };
    finish_step(state, &o.grad, red, &cfg0, started)
}

/// `cfg.adapt_steps` plain gradient steps at `α` on minibatches of the
/// target adaptation windows. Only `theta` changes.
pub fn adapt_to_target<R: Rng>(
    state: &mut TrainState,
    windows: &WindowBatch,
    graph: &TrafficGraph,
    model: &Model,
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::EmptyBatch("no target windows to adapt on".into()));
    }
    for _ in 0..cfg.adapt_steps {
        let idx = sample(rng, windows.len(), cfg.adapt_batch.min(windows.len())).into_vec();
        let batch = windows.select(&idx);
        state.theta.zero_grads();
        let loss = model.accumulate_task_grad(&mut state.theta, &batch, graph, cfg.loss_form)?;
        sgd_step(&mut state.theta, cfg.alpha)?;
        state.adapt_history.push(loss);
    }
    state.theta.zero_grads();
    Ok(())
}

/// Trains `variant` on `data` and restores the selected parameters, which
/// are the initialization handed to target adaptation.
pub fn train_variant(variant: Variant, data: &TransferData, model: &Model, cfg: &MetaConfig) -> Result<TrainState> {
    cfg.validate()?;
    model.validate()?;
    let cfg = match variant {
        Variant::NoDa | Variant::Finetune | Variant::TargetOnly => MetaConfig { lambda: 0.0, ..cfg.clone() },
        Variant::Full | Variant::NoMeta => cfg.clone(),
    };
    let mut state = TrainState::new(model, &cfg)?;
    let target = &data.target;
    if variant == Variant::TargetOnly {
        let pool = target.adapt_windows()?;
        let mut rng = stream(cfg.seed, STREAM_TASKS);
        let size = (cfg.task_batch * (cfg.k_support + cfg.k_query)).min(pool.len());
        for _ in 0..cfg.meta_steps {
            let batch = pool.select(&sample(&mut rng, pool.len(), size).into_vec());
            target_only_step(&mut state, &batch, &target.graph, model, &cfg)?;
            if state.stagnated(&cfg) {
                break;
            }
        }
    } else {
        if data.n_sources() == 0 {
            return Err(Error::contract(format!("variant `{variant}` needs at least one source city")));
        }
        let sources = data.sources();
        let pools: Vec<CityPool<'_>> = sources
            .iter()
            .map(|c| CityPool {
                graph: &c.graph,
                windows: &c.windows,
            })
            .collect();
        let domain = cfg.lambda > 0.0 && !target.is_zero_shot();
        if cfg.lambda > 0.0 && !domain {
            log::warn!("no target adaptation windows: training `{variant}` without the domain terms");
        }
        let mut task_rng = stream(cfg.seed, STREAM_TASKS);
        let mut target_rng = stream(cfg.seed, STREAM_TARGET);
        let step = if variant == Variant::Full || variant == Variant::NoDa { meta_step } else { pooled_step };
        for _ in 0..cfg.meta_steps {
            let tasks = sample_tasks_with(&pools, cfg.k_support, cfg.k_query, cfg.task_batch, &mut task_rng)?;
            let graphs: Vec<&TrafficGraph> = tasks.iter().map(|t| pools[t.city].graph).collect();
            let tb = if domain {
                Some(TargetBatch::sample(target, cfg.target_batch, &mut target_rng)?)
            } else {
                None
            };
            step(&mut state, &tasks, &graphs, tb.as_ref(), model, &cfg)?;
            if state.stagnated(&cfg) {
                break;
            }
        }
    }
    state.restore_best();
    Ok(state)
}

/// Adapts `state.theta` on the target's adaptation windows with the
/// seed's adaptation stream. A zero-shot target leaves it unchanged.
pub fn adapt_to_split(state: &mut TrainState, target: &TargetData, model: &Model, cfg: &MetaConfig) -> Result<()> {
    match &target.adapt {
        Some(adapt) => adapt_to_target(state, adapt, &target.graph, model, cfg, &mut stream(cfg.seed, STREAM_ADAPT)),
        None => Ok(()),
    }
}

/// [`train_variant`] followed by [`adapt_to_split`].
pub fn run_variant(variant: Variant, data: &TransferData, model: &Model, cfg: &MetaConfig) -> Result<TrainState> {
    let mut state = train_variant(variant, data, model, cfg)?;
    adapt_to_split(&mut state, &data.target, model, cfg)?;
    Ok(state)
}
