use rand::Rng;
use salf::aggregation::{AggregatorKind, Unbiasing};
use salf::data::TaskKind;
use salf::engine::{
    run_experiment, run_experiment_with_data, run_round, run_round_with_depths, sweep, DataSource, EngineState,
    ExperimentConfig, ExperimentData, LrSchedule, SweepSpec,
};
use salf::error::Error;
use salf::nn::{full_gradient, init_params, ModelSpec};
use salf::rng::{stream, Purpose};
use salf::straggler::{DepthDraw, StragglerModel};

fn config(aggregator: AggregatorKind, stragglers: StragglerModel) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelSpec::logistic(vec![3, 3, 2, 2], 0.01),
        data: DataSource::Synthetic {
            task: TaskKind::Logistic,
            n_per_client: 80,
            dim: 10,
            heterogeneity: 0.5,
            noise_sd: 0.1,
            seed: Some(4),
        },
        clients: 6,
        rounds: 50,
        aggregator,
        stragglers,
        lr: LrSchedule::Constant { eta: 0.3 },
        batch_size: 8,
        eval_every: 10,
        seed: 9,
        record_timing: false,
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn runs_are_reproducible_and_thread_count_invisible() {
    let cfg = config(AggregatorKind::salf(), StragglerModel::FixedFraction { q: 0.5 });
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| run_experiment(&cfg).unwrap())
    };
    let (a, b, c) = (run(1), run(1), run(4));
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(bits(&a.final_params.to_flat()), bits(&c.final_params.to_flat()));
    let mut other = cfg.clone();
    other.seed = 10;
    assert_ne!(run_experiment(&other).unwrap().records, a.records);
}

#[test]
fn salf_without_stragglers_or_debiasing_is_vanilla_bitwise() {
    let vanilla = run_experiment(&config(AggregatorKind::VanillaFa, StragglerModel::FixedFraction { q: 0.5 })).unwrap();
    let salf0 = run_experiment(&config(
        AggregatorKind::Salf { unbiasing: Unbiasing::Zero },
        StragglerModel::FixedFraction { q: 0.0 },
    ))
    .unwrap();
    let drop0 = run_experiment(&config(AggregatorKind::DropStragglers, StragglerModel::FixedFraction { q: 0.0 })).unwrap();
    assert_eq!(salf0.records.len(), 50);
    assert_eq!(bits(&salf0.final_params.to_flat()), bits(&vanilla.final_params.to_flat()));
    assert_eq!(salf0.records, vanilla.records);
    assert_eq!(drop0.records, vanilla.records);
}

#[test]
fn a_round_where_nobody_finishes_changes_nothing() {
    let cfg = config(AggregatorKind::salf(), StragglerModel::UniformDepth);
    let data = ExperimentData::load(&cfg).unwrap();
    let state = EngineState::new(&cfg).unwrap();
    let before = state.params.clone();
    let draw = DepthDraw { round: 1, num_layers: 4, depths: vec![5; 6] };
    let (after, record) = run_round_with_depths(state, &cfg, &data, &draw).unwrap();
    assert_eq!(bits(&after.params.to_flat()), bits(&before.to_flat()));
    assert_eq!(record.participants, vec![0; 4]);
    assert_eq!(record.stragglers, 6);
    assert_eq!(after.round, 2);
}

#[test]
fn participation_counts_are_monotone_in_depth() {
    let cfg = config(AggregatorKind::salf(), StragglerModel::UniformDepth);
    for r in run_experiment(&cfg).unwrap().records {
        assert!(r.participants.windows(2).all(|w| w[0] <= w[1]), "{:?}", r.participants);
        assert!(*r.participants.last().unwrap() <= 6);
    }
}

/// One client with vanilla averaging is plain mini-batch SGD.
#[test]
fn single_client_vanilla_is_sgd() {
    let mut cfg = config(AggregatorKind::VanillaFa, StragglerModel::FixedFraction { q: 0.0 });
    cfg.clients = 1;
    cfg.rounds = 20;
    let data = ExperimentData::load(&cfg).unwrap();
    let result = run_experiment_with_data(&cfg, &data).unwrap();
    let shard = data.train.shard(0);
    let mut w = init_params::<f64>(&cfg.model, cfg.seed).unwrap().to_flat();
    let sizes = cfg.model.block_sizes();
    for round in 1..=cfg.rounds {
        let mut rng = stream(cfg.seed, Purpose::Batch, round as u64, 0);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..shard.len())).collect();
        let params = salf::nn::LayerwiseParams::from_flat(&w, &sizes).unwrap();
        let g = full_gradient(&cfg.model, &params, &shard.gather(&idx)).unwrap().to_flat();
        w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= 0.3 * gi);
    }
    let got = result.final_params.to_flat();
    assert!(got.iter().zip(&w).all(|(a, b)| (a - b).abs() <= 1e-14 * (1.0 + b.abs())));
}

#[test]
fn evaluation_cadence() {
    let mut cfg = config(AggregatorKind::salf(), StragglerModel::UniformDepth);
    cfg.rounds = 23;
    let every10 = run_experiment(&cfg).unwrap();
    let evaluated: Vec<usize> = every10.records.iter().filter(|r| r.eval_loss.is_some()).map(|r| r.round).collect();
    assert_eq!(evaluated, vec![10, 20, 23]);
    cfg.eval_every = 0;
    let none = run_experiment(&cfg).unwrap();
    assert!(none.records.iter().all(|r| r.eval_loss.is_none() && r.eval_accuracy.is_none()));
    assert!(r_final(&none).is_some());
    assert_eq!(none.final_eval, every10.final_eval);
}

fn r_final(r: &salf::engine::ExperimentResult) -> Option<f64> {
    r.final_accuracy()
}

#[test]
fn theorem_schedule_decays() {
    let mut cfg = config(AggregatorKind::salf(), StragglerModel::UniformDepth);
    cfg.lr = LrSchedule::Theorem1 { rho_c: 0.5, rho_s: 1.0 };
    cfg.rounds = 5;
    let records = run_experiment(&cfg).unwrap().records;
    let gamma = 16.0;
    for r in &records {
        assert!((r.eta - 2.0 / (0.5 * (gamma + r.round as f64))).abs() < 1e-15);
    }
}

#[test]
fn async_baseline_trains_and_differs_from_drop() {
    let a = run_experiment(&config(AggregatorKind::AsyncDelayed, StragglerModel::FixedFraction { q: 0.8 })).unwrap();
    let d = run_experiment(&config(AggregatorKind::DropStragglers, StragglerModel::FixedFraction { q: 0.8 })).unwrap();
    assert_ne!(a.final_params, d.final_params);
    assert!(a.final_accuracy().unwrap() > 0.6);
}

#[test]
fn invalid_configs_are_rejected_up_front() {
    let mut cfg = config(AggregatorKind::salf(), StragglerModel::UniformDepth);
    cfg.clients = 0;
    assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    let mut cfg = config(AggregatorKind::salf(), StragglerModel::UniformDepth);
    cfg.model = ModelSpec::linear(vec![5, 5], 0.1);
    assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    let mut cfg = config(AggregatorKind::salf(), StragglerModel::FixedFraction { q: 2.0 });
    cfg.rounds = 1;
    assert!(matches!(EngineState::new(&cfg), Err(Error::Config(_))));
    let mnist = ExperimentConfig {
        model: ModelSpec::mlp(vec![784, 10]),
        data: DataSource::Mnist { dir: None, seed: None },
        ..config(AggregatorKind::salf(), StragglerModel::UniformDepth)
    };
    match ExperimentData::load(&mnist) {
        Err(Error::Config(msg)) => assert!(msg.contains("train-images-idx3-ubyte")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn divergence_is_reported_with_its_round() {
    let mut cfg = config(AggregatorKind::VanillaFa, StragglerModel::UniformDepth);
    cfg.model = ModelSpec::linear(vec![5, 5], 0.01);
    cfg.data = DataSource::Synthetic {
        task: TaskKind::Linear,
        n_per_client: 20,
        dim: 10,
        heterogeneity: 0.0,
        noise_sd: 0.0,
        seed: None,
    };
    cfg.lr = LrSchedule::Constant { eta: 1e6 };
    let data = ExperimentData::load(&cfg).unwrap();
    let mut state = EngineState::new(&cfg).unwrap();
    let failure = loop {
        match run_round(state, &cfg, &data) {
            Ok((next, _)) => state = next,
            Err(e) => break e,
        }
    };
    assert!(matches!(failure, Error::Round { round, ref source } if round > 1 && matches!(**source, Error::Numeric(_))));
}

fn sweep_spec(methods: Vec<AggregatorKind>, fractions: Vec<f64>, seeds: Vec<u64>) -> SweepSpec {
    let mut base = config(AggregatorKind::salf(), StragglerModel::UniformDepth);
    base.rounds = 15;
    base.eval_every = 0;
    SweepSpec { base, methods, fractions, seeds }
}

#[test]
fn single_cell_sweep_matches_a_plain_run() {
    let spec = sweep_spec(vec![AggregatorKind::salf()], vec![0.5], vec![3]);
    let data = ExperimentData::load(&spec.base).unwrap();
    let result = sweep(&spec, &data).unwrap();
    let direct = run_experiment(&spec.cell_config(AggregatorKind::salf(), 0.5, 3)).unwrap();
    assert_eq!(result.cells.len(), 1);
    assert_eq!(result.cells[0].accuracy, direct.final_accuracy());
    assert_eq!(result.rows[0].stats[0].sd, Some(0.0));
    assert_eq!(sweep(&spec, &data).unwrap(), result);
}

#[test]
fn sweep_isolates_failing_cells() {
    let spec = sweep_spec(vec![AggregatorKind::DropStragglers, AggregatorKind::salf()], vec![0.5, 1.5], vec![1, 2]);
    let data = ExperimentData::load(&spec.base).unwrap();
    let result = sweep(&spec, &data).unwrap();
    assert!(!result.all_succeeded());
    for row in &result.rows {
        assert_eq!((row.stats[0].runs, row.stats[0].failures), (2, 0));
        assert_eq!((row.stats[1].runs, row.stats[1].failures), (0, 2));
        assert!(row.stats[0].mean.is_some() && row.stats[1].mean.is_none());
    }
}

#[test]
fn empty_sweep_grid_is_rejected() {
    let spec = sweep_spec(vec![], vec![0.5], vec![1]);
    let data = ExperimentData::load(&spec.base).unwrap();
    assert!(matches!(sweep(&spec, &data), Err(Error::Config(_))));
}
