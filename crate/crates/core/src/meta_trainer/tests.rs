use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::gradcheck::{central_differences, max_relative_error};
use crate::diffcore::{adam_step, DenseArray, OptimizerState, ParamSet};
use crate::graph_data::{
    make_windows, sample_tasks, synth_city, CityPool, EpisodeTask, SpeedSeries, SynthConfig, TrafficGraph, WindowBatch,
};
use crate::inference_head::LossForm;
use crate::st_embedding::{EncoderConfig, Tf2Input};

fn tiny_model() -> Model {
    Model {
        encoder: EncoderConfig {
            input_dim: 1,
            hidden: 4,
            heads: 2,
            tf2_input: Tf2Input::Sequence,
        },
        horizon: 2,
    }
}

fn tiny_cfg() -> MetaConfig {
    MetaConfig {
        task_batch: 2,
        k_support: 2,
        k_query: 2,
        target_batch: 2,
        meta_steps: 6,
        adapt_steps: 3,
        adapt_batch: 2,
        selection_window: 2,
        ..MetaConfig::default()
    }
}

fn city(id: &str, seed: u64, days: usize) -> (TrafficGraph, SpeedSeries) {
    let c = synth_city(&SynthConfig {
        city_id: id.into(),
        n_nodes: 4,
        n_days: days,
        interval_minutes: 60,
        seed,
        radius: 0.7,
        ..SynthConfig::default()
    })
    .unwrap();
    (c.graph, c.series)
}

fn tiny_data(adapt_days: usize) -> TransferData {
    let sources = vec![city("a", 1, 3), city("b", 2, 3)];
    let target = city("t", 3, 3);
    let cfg = DataConfig {
        history: 3,
        horizon: 2,
        adapt_days,
        ..DataConfig::default()
    };
    prepare_transfer(&sources, &target, &cfg).unwrap()
}

fn pools(data: &TransferData) -> Vec<CityPool<'_>> {
    data.sources()
        .iter()
        .map(|c| CityPool {
            graph: &c.graph,
            windows: &c.windows,
        })
        .collect()
}

fn tasks_and_graphs<'a>(pools: &[CityPool<'a>], n: usize, seed: u64) -> (Vec<EpisodeTask>, Vec<&'a TrafficGraph>) {
    let tasks = sample_tasks(pools, 2, 2, n, seed).unwrap();
    let graphs = tasks.iter().map(|t| pools[t.city].graph).collect();
    (tasks, graphs)
}

fn init(seed: u64) -> ParamSet {
    tiny_model().init(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// `f_θ(x) = θ·x` with squared loss summed over `(x, y)` pairs.
fn linear_grad(data: &[(f64, f64)]) -> impl FnMut(&mut ParamSet) -> crate::Result<f64> + '_ {
    move |p: &mut ParamSet| {
        crate::diffcore::forward_and_grad(p, |t, b| {
            let th = b.get("theta")?;
            let mut total = None;
            for &(x, y) in data {
                let pred = t.scale(th, x)?;
                let r = t.add_scalar(pred, -y)?;
                let sq = t.mul(r, r)?;
                total = Some(match total {
                    None => sq,
                    Some(acc) => t.add(acc, sq)?,
                });
            }
            t.sum(total.expect("non-empty"))
        })
    }
}

fn theta(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("theta", DenseArray::vector(vec![v])).unwrap();
    p
}

#[test]
fn toy_inner_step_matches_hand_update() {
    let support = [(1.0, 0.0)];
    let fast = inner_adapt_with(&theta(1.0), 0.01, 1, linear_grad(&support)).unwrap();
    let got = fast.value("theta").unwrap().data()[0];
    // d/dθ (θ·1 − 0)² = 2θ = 2
    assert_eq!(got.to_bits(), (1.0 - 0.01 * 2.0f64).to_bits());
    assert!((got - 0.98).abs() < 1e-15);
}

#[test]
fn zero_rate_adaptation_is_identity() {
    let support = [(1.0, 0.0), (-2.0, 3.0)];
    let t = theta(0.37);
    assert!(inner_adapt_with(&t, 0.0, 3, linear_grad(&support)).unwrap().values_equal(&t));

    let data = tiny_data(1);
    let model = tiny_model();
    let p = pools(&data);
    let (tasks, graphs) = tasks_and_graphs(&p, 1, 4);
    let th = init(5);
    let fast = inner_adapt_with(&th, 0.0, 2, |q| {
        model.accumulate_task_grad(q, &tasks[0].support, graphs[0], LossForm::Rmse)
    })
    .unwrap();
    assert!(fast.values_equal(&th));
}

#[test]
fn zero_inner_steps_is_rejected() {
    assert!(inner_adapt_with(&theta(1.0), 0.1, 0, linear_grad(&[(1.0, 0.0)])).is_err());
}

#[test]
fn small_steps_descend_on_toy_tasks() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope: f64 = rng.random_range(-2.0..2.0);
        let support: Vec<(f64, f64)> = (0..5)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                (x, slope * x + rng.random_range(-0.1..0.1))
            })
            .collect();
        let t = theta(rng.random_range(-3.0..3.0));
        let loss = |p: &ParamSet| {
            let th = p.value("theta").unwrap().data()[0];
            support.iter().map(|(x, y)| (th * x - y).powi(2)).sum::<f64>()
        };
        let fast = inner_adapt_with(&t, 1e-3, 1, linear_grad(&support)).unwrap();
        assert!(loss(&fast) <= loss(&t), "seed {seed}");
    }
}

#[test]
fn small_steps_descend_on_the_encoder() {
    let data = tiny_data(1);
    let model = tiny_model();
    let p = pools(&data);
    for seed in 0..20 {
        let (tasks, graphs) = tasks_and_graphs(&p, 1, seed);
        let th = init(seed);
        let before = model.task_loss(&th, &tasks[0].support, graphs[0], LossForm::Rmse).unwrap();
        let cfg = MetaConfig {
            alpha: 1e-3,
            ..tiny_cfg()
        };
        let fast = inner_adapt(&th, &tasks[0], graphs[0], &model, &cfg).unwrap();
        let after = model.task_loss(&fast, &tasks[0].support, graphs[0], LossForm::Rmse).unwrap();
        assert!(after <= before, "seed {seed}: {after} > {before}");
    }
}

#[test]
fn inner_adaptation_leaves_meta_parameters_untouched() {
    let data = tiny_data(1);
    let model = tiny_model();
    let p = pools(&data);
    let (tasks, graphs) = tasks_and_graphs(&p, 1, 7);
    let th = init(8);
    let copy = th.clone();
    let fast = inner_adapt(&th, &tasks[0], graphs[0], &model, &tiny_cfg()).unwrap();
    assert!(th.values_equal(&copy));
    assert!(!fast.values_equal(&th));
}

fn constant_series(t: usize, n: usize, v: f64) -> SpeedSeries {
    SpeedSeries::new(
        "k",
        (0..n).map(|i| format!("n{i}")).collect(),
        DenseArray::matrix(t, n, vec![v; t * n]).unwrap(),
        crate::graph_data::synth::start_time(),
        5,
    )
    .unwrap()
}

#[test]
fn exact_predictions_have_zero_loss() {
    let model = tiny_model();
    let mut th = init(0);
    for (_, v) in th.iter_mut() {
        v.fill(0.0);
    }
    th.value_mut("head.b").unwrap().fill(4.5);
    let s = constant_series(20, 4, 4.5);
    let w = make_windows(&s, 3, 2, s.full_range(), 1).unwrap();
    let g = TrafficGraph::new("k", 4, vec![(0, 1, 1.0), (1, 2, 1.0)], 5).unwrap();
    assert_eq!(model.task_loss(&th, &w, &g, LossForm::Rmse).unwrap(), 0.0);
}

#[test]
fn single_entry_loss_is_absolute_error() {
    let model = Model {
        horizon: 1,
        ..tiny_model()
    };
    let th = model.init(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let (g, s) = city("one", 4, 1);
    let g1 = TrafficGraph::new("one", 1, vec![], g.interval_minutes).unwrap();
    let col: Vec<f64> = (0..s.len()).map(|t| s.get(t, 0) / 50.0).collect();
    let s1 = SpeedSeries::new("one", vec!["n0".into()], DenseArray::matrix(s.len(), 1, col).unwrap(), s.start, s.interval_minutes)
        .unwrap();
    let w = make_windows(&s1, 3, 1, s1.full_range(), 1).unwrap().slice(0, 1);
    let pred = model.predict(&th, &w, &g1).unwrap().data()[0];
    let loss = model.task_loss(&th, &w, &g1, LossForm::Rmse).unwrap();
    assert!((loss - (pred - w.target(0, 0, 0)).abs()).abs() < 1e-15);
}

#[test]
fn set_loss_matches_per_window_sum() {
    let data = tiny_data(1);
    let model = tiny_model();
    let src = &data.sources()[0];
    for seed in 0..5 {
        let th = init(seed);
        let idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), src.windows.len(), 3).into_vec();
        let set = src.windows.select(&idx);
        let (mut sq, mut n) = (0.0, 0usize);
        for b in 0..3 {
            let one = set.slice(b, b + 1);
            let pred = model.predict(&th, &one, &src.graph).unwrap();
            for node in 0..one.n_nodes {
                for step in 0..one.horizon {
                    if one.target_is_valid(0, step, node) {
                        sq += (pred.get2(node, step) - one.target(0, step, node)).powi(2);
                        n += 1;
                    }
                }
            }
        }
        let want = (sq / n as f64).sqrt();
        let got = model.task_loss(&th, &set, &src.graph, LossForm::Rmse).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let mse = model.task_loss(&th, &set, &src.graph, LossForm::Mse).unwrap();
        assert!((mse - sq / n as f64).abs() < 1e-12);
    }
}

#[test]
fn meta_step_needs_exactly_the_configured_task_count() {
    let data = tiny_data(1);
    let model = tiny_model();
    let p = pools(&data);
    let cfg = MetaConfig {
        task_batch: 5,
        ..tiny_cfg()
    };
    for n in [4, 6] {
        let (tasks, graphs) = tasks_and_graphs(&p, n, 1);
        let mut state = TrainState::new(&model, &cfg).unwrap();
        assert!(meta_step(&mut state, &tasks, &graphs, None, &model, &cfg).is_err());
        assert_eq!(state.step, 0);
    }
    let (tasks, graphs) = tasks_and_graphs(&p, 5, 1);
    let mut state = TrainState::new(&model, &cfg).unwrap();
    meta_step(&mut state, &tasks, &graphs, None, &model, &cfg).unwrap();
    assert_eq!((state.step, state.history.len()), (1, 1));
}

/// First-order MAML on the prediction loss alone, written out directly.
fn fomaml_reference(theta: &mut ParamSet, opt: &mut OptimizerState, tasks: &[EpisodeTask], graphs: &[&TrafficGraph], model: &Model, cfg: &MetaConfig) {
    let mut sum = vec![0.0; theta.num_values()];
    for (task, graph) in tasks.iter().zip(graphs) {
        let mut fast = theta.clone();
        fast.zero_grads();
        model.accumulate_task_grad(&mut fast, &task.support, graph, cfg.loss_form).unwrap();
        crate::diffcore::sgd_step(&mut fast, cfg.alpha).unwrap();
        fast.zero_grads();
        model.accumulate_task_grad(&mut fast, &task.query, graph, cfg.loss_form).unwrap();
        sum.iter_mut().zip(fast.flat_grads()).for_each(|(s, g)| *s += g);
    }
    sum.iter_mut().for_each(|s| *s /= tasks.len() as f64);
    theta.zero_grads();
    let names: Vec<(String, usize)> = theta.iter().map(|(n, v)| (n.to_string(), v.len())).collect();
    let mut at = 0;
    for (n, len) in names {
        theta.accumulate_grad(&n, &sum[at..at + len], 1.0).unwrap();
        at += len;
    }
    adam_step(theta, opt).unwrap();
}

#[test]
fn zero_lambda_reduces_to_first_order_maml() {
    let data = tiny_data(1);
    let model = tiny_model();
    let p = pools(&data);
    let cfg = MetaConfig {
        lambda: 0.0,
        ..tiny_cfg()
    };
    let mut state = TrainState::new(&model, &cfg).unwrap();
    let mut th = state.theta.clone();
    let mut opt = OptimizerState::adam(cfg.beta).unwrap();
    let d_before = state.d_params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for step in 0..3 {
        let (tasks, graphs) = tasks_and_graphs(&p, cfg.task_batch, step);
        let tb = TargetBatch::sample(&data.target, 2, &mut rng).unwrap();
        let log = meta_step(&mut state, &tasks, &graphs, Some(&tb), &model, &cfg).unwrap();
        fomaml_reference(&mut th, &mut opt, &tasks, &graphs, &model, &cfg);
        assert!(state.theta.values_equal(&th), "step {step}");
        assert_eq!(log.mean_query_loss, log.l_p);
    }
    assert!(state.d_params.values_equal(&d_before));
}

#[test]
fn first_and_second_order_agree_without_inner_steps() {
    let data = tiny_data(1);
    let model = tiny_model();
    let p = pools(&data);
    let (tasks, graphs) = tasks_and_graphs(&p, 2, 3);
    let th = init(2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tb = TargetBatch::sample(&data.target, 2, &mut rng).unwrap();
    let d = crate::domain_adversarial::init_discriminator(&mut rng, 4).unwrap();
    let grad = |order| {
        let cfg = MetaConfig {
            inner_steps: 0,
            maml_order: order,
            ..tiny_cfg()
        };
        meta_gradient(&th, &tasks, &graphs, Some(&tb), &d, &model, &cfg).unwrap()
    };
    let (fo, so) = (grad(MamlOrder::First), grad(MamlOrder::Second));
    assert!(fo.iter().zip(&so).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn second_order_matches_differences_of_the_meta_objective() {
    let data = tiny_data(1);
    let model = tiny_model();
    let p = pools(&data);
    let (tasks, graphs) = tasks_and_graphs(&p, 1, 11);
    let th = init(12);
    let d = ParamSet::new();
    let cfg = |order, steps| MetaConfig {
        alpha: 0.3,
        lambda: 0.0,
        task_batch: 1,
        inner_steps: steps,
        maml_order: order,
        ..tiny_cfg()
    };
    for steps in [1, 2] {
        let c = cfg(MamlOrder::Second, steps);
        let objective = |q: &ParamSet| {
            let fast = inner_adapt(q, &tasks[0], graphs[0], &model, &c)?;
            model.task_loss(&fast, &tasks[0].query, graphs[0], LossForm::Rmse)
        };
        let numeric = central_differences(&th, 1e-5, objective).unwrap();
        let so = meta_gradient(&th, &tasks, &graphs, None, &d, &model, &c).unwrap();
        let fo = meta_gradient(&th, &tasks, &graphs, None, &d, &model, &cfg(MamlOrder::First, steps)).unwrap();
        let (e_so, e_fo) = (max_relative_error(&so, &numeric, 1e-4), max_relative_error(&fo, &numeric, 1e-4));
        assert!(e_so < 1e-4, "{steps} steps: second order off by {e_so}");
        assert!(e_fo > 10.0 * e_so, "{steps} steps: first order {e_fo} vs second order {e_so}");
    }
}

#[test]
fn adaptation_descends_and_leaves_the_discriminator_alone() {
    let data = tiny_data(1);
    let model = tiny_model();
    let t = &data.target;
    let adapt = t.adapt_windows().unwrap();
    for seed in 0..5 {
        let cfg = MetaConfig {
            seed,
            adapt_steps: 30,
            adapt_batch: 4,
            alpha: 0.05,
            ..tiny_cfg()
        };
        let mut state = TrainState::new(&model, &cfg).unwrap();
        let d = state.d_params.clone();
        let before = model.task_loss(&state.theta, adapt, &t.graph, LossForm::Rmse).unwrap();
        adapt_to_target(&mut state, adapt, &t.graph, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let after = model.task_loss(&state.theta, adapt, &t.graph, LossForm::Rmse).unwrap();
        assert!(after < before, "seed {seed}: {after} >= {before}");
        assert!(state.d_params.values_equal(&d));
        assert_eq!(state.adapt_history.len(), 30);
    }
}

#[test]
fn zero_adaptation_steps_keep_the_initialization() {
    let data = tiny_data(1);
    let model = tiny_model();
    let cfg = MetaConfig {
        adapt_steps: 0,
        ..tiny_cfg()
    };
    let mut state = TrainState::new(&model, &cfg).unwrap();
    let th = state.theta.clone();
    let t = &data.target;
    adapt_to_target(&mut state, t.adapt_windows().unwrap(), &t.graph, &model, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(state.theta.values_equal(&th));
}

#[test]
fn empty_adaptation_set_is_an_error() {
    let data = tiny_data(1);
    let model = tiny_model();
    let mut state = TrainState::new(&model, &tiny_cfg()).unwrap();
    let empty = data.target.adapt_windows().unwrap().select(&[]);
    let r = adapt_to_target(&mut state, &empty, &data.target.graph, &model, &tiny_cfg(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(crate::Error::EmptyBatch(_))));
}

fn histories_equal(a: &TrainState, b: &TrainState) -> bool {
    a.history.len() == b.history.len()
        && a.history.iter().zip(&b.history).all(|(x, y)| {
            (x.step, x.mean_query_loss.to_bits(), x.l_st.to_bits(), x.l_p.to_bits())
                == (y.step, y.mean_query_loss.to_bits(), y.l_st.to_bits(), y.l_p.to_bits())
        })
}

#[test]
fn same_seed_same_run() {
    let data = tiny_data(1);
    let model = tiny_model();
    for v in [Variant::Full, Variant::NoMeta] {
        let a = run_variant(v, &data, &model, &tiny_cfg()).unwrap();
        let b = run_variant(v, &data, &model, &tiny_cfg()).unwrap();
        assert!(histories_equal(&a, &b), "{v}");
        assert!(a.theta.values_equal(&b.theta));
        assert!(a.d_params.values_equal(&b.d_params));
        let c = run_variant(v, &data, &model, &MetaConfig { seed: 1, ..tiny_cfg() }).unwrap();
        assert!(!histories_equal(&a, &c));
    }
}

#[test]
fn variants_share_initialization_and_tasks() {
    let data = tiny_data(1);
    let model = tiny_model();
    let cfg = MetaConfig {
        meta_steps: 1,
        adapt_steps: 0,
        ..tiny_cfg()
    };
    // With one step the first logged prediction loss is measured at the
    // common initialization on the common first task batch.
    let full = run_variant(Variant::Full, &data, &model, &cfg).unwrap();
    let no_da = run_variant(Variant::NoDa, &data, &model, &cfg).unwrap();
    assert_eq!(full.history[0].l_p.to_bits(), no_da.history[0].l_p.to_bits());
    assert!(full.history[0].l_st > 0.0);
}

#[test]
fn history_length_tracks_the_step_counter() {
    let data = tiny_data(1);
    let model = tiny_model();
    for v in Variant::ALL {
        let s = run_variant(v, &data, &model, &tiny_cfg()).unwrap();
        assert_eq!(s.history.len(), s.step, "{v}");
        assert!(s.step <= tiny_cfg().meta_steps);
        assert_eq!(s.adapt_history.len(), tiny_cfg().adapt_steps);
    }
}

#[test]
fn without_domain_terms_overall_equals_prediction_loss() {
    let data = tiny_data(1);
    let model = tiny_model();
    let cfg = MetaConfig {
        lambda: 1.5,
        ..tiny_cfg()
    };
    for v in [Variant::NoDa, Variant::Finetune, Variant::TargetOnly] {
        let s = run_variant(v, &data, &model, &cfg).unwrap();
        assert!(!s.history.is_empty());
        for l in &s.history {
            assert_eq!(l.mean_query_loss, l.l_p, "{v}");
            assert_eq!(l.l_st, 0.0);
        }
        assert!(s.disc_history.is_empty());
    }
    let full = run_variant(Variant::Full, &data, &model, &cfg).unwrap();
    assert_eq!(full.disc_history.len(), full.step);
    for l in &full.history {
        assert!((l.mean_query_loss - (l.l_p + 1.5 * l.l_st)).abs() < 1e-15);
    }
}

#[test]
fn target_only_never_reads_source_cities() {
    let data = tiny_data(1);
    let model = tiny_model();
    run_variant(Variant::TargetOnly, &data, &model, &tiny_cfg()).unwrap();
    assert_eq!(data.source_reads(), 0);
    run_variant(Variant::Finetune, &data, &model, &tiny_cfg()).unwrap();
    assert!(data.source_reads() > 0);
}

#[test]
fn zero_shot_split_uses_pooled_statistics() {
    let data = tiny_data(0);
    assert!(data.target.is_zero_shot());
    let n = &data.target.normalizer;
    assert!(n.mean.iter().all(|&m| m == n.mean[0]) && n.std[0] > 0.0);
    let model = tiny_model();
    assert!(run_variant(Variant::TargetOnly, &data, &model, &tiny_cfg()).is_err());
    let s = run_variant(Variant::Full, &data, &model, &tiny_cfg()).unwrap();
    assert!(s.disc_history.is_empty());
    assert!(s.adapt_history.is_empty());
}

#[test]
fn target_may_not_be_a_source() {
    let a = city("a", 1, 3);
    let cfg = DataConfig {
        history: 3,
        horizon: 2,
        adapt_days: 1,
        ..DataConfig::default()
    };
    assert!(prepare_transfer(&[a.clone()], &a, &cfg).is_err());
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
    }
    assert!(matches!("maml".parse::<Variant>(), Err(crate::Error::UnknownVariant(_))));
}

#[test]
fn config_rejects_unknown_fields_and_bad_rates() {
    let c: MetaConfig = serde_json::from_str(r#"{"alpha": 0.05}"#).unwrap();
    assert_eq!((c.alpha, c.beta, c.task_batch, c.lambda), (0.05, 0.001, 5, 1.5));
    assert!(serde_json::from_str::<MetaConfig>(r#"{"alpah": 0.05}"#).is_err());
    for bad in [
        MetaConfig { alpha: 0.0, ..MetaConfig::default() },
        MetaConfig { beta: -1.0, ..MetaConfig::default() },
        MetaConfig { task_batch: 0, ..MetaConfig::default() },
        MetaConfig { lambda: f64::NAN, ..MetaConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

/// Mean query loss of `theta` over fixed held-out tasks.
fn query_loss(theta: &ParamSet, tasks: &[EpisodeTask], graphs: &[&TrafficGraph], model: &Model) -> f64 {
    tasks
        .iter()
        .zip(graphs)
        .map(|(t, g)| model.task_loss(theta, &t.query, g, LossForm::Rmse).unwrap())
        .sum::<f64>()
        / tasks.len() as f64
}

#[test]
fn meta_training_lowers_query_loss() {
    let sources = vec![city("a", 21, 4), city("b", 22, 4)];
    let target = city("t", 23, 4);
    let dc = DataConfig {
        history: 4,
        horizon: 2,
        adapt_days: 1,
        ..DataConfig::default()
    };
    let data = prepare_transfer(&sources, &target, &dc).unwrap();
    let model = tiny_model();
    let p = pools(&data);
    let (held, graphs) = tasks_and_graphs(&p, 10, 999);
    let mut wins = 0;
    for seed in 0..5 {
        let cfg = MetaConfig {
            seed,
            meta_steps: 300,
            task_batch: 5,
            k_support: 4,
            k_query: 4,
            lambda: 0.0,
            adapt_steps: 0,
            ..MetaConfig::default()
        };
        let before = query_loss(&TrainState::new(&model, &cfg).unwrap().theta, &held, &graphs, &model);
        let trained = run_variant(Variant::NoDa, &data, &model, &cfg).unwrap();
        let after = query_loss(&trained.theta, &held, &graphs, &model);
        wins += usize::from(after < before);
    }
    assert!(wins >= 4, "{wins}/5");
}

#[test]
fn windows_batch_helpers() {
    let data = tiny_data(1);
    let w: &WindowBatch = &data.sources()[0].windows;
    let a = w.slice(0, 2);
    let b = w.slice(2, 5);
    assert_eq!(a.concat(&b).unwrap(), w.slice(0, 5));
}
