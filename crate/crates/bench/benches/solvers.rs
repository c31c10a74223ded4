//! Per-iteration costs of the building rollout and of each solver's
//! objective/direction oracle on the 12-zone desk scenario.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use latentopt::harness::{identify_linear, ExperimentConfig, Scenario};
use latentopt::latent::{Group, LatentModelSet};
use latentopt::optim::{
    groundtruth_solve, optiden_solve, penalty_objective, zeroth_order_direction, LatentObjective, OptProblem,
    SolverConfig,
};
use latentopt::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    scenario: Scenario,
    problem: OptProblem,
    set: LatentModelSet,
}

/// Weights are untrained; only shapes matter for timing.
fn fixture() -> Fixture {
    let mut cfg = ExperimentConfig::default();
    cfg.days.train = 3;
    cfg.days.test = 1;
    let scenario = Scenario::prepare(&cfg).expect("scenario");
    let problem = scenario.problem(0, None).expect("problem");
    let mut set = LatentModelSet::new(scenario.building.zones(), scenario.building.conditioned(), &cfg.train);
    set.fit_normalizers(&scenario.train_split().unwrap().transitions().unwrap());
    Fixture { scenario, problem, set }
}

fn rollout(c: &mut Criterion) {
    let f = fixture();
    let a = Tensor::filled(f.problem.horizon(), f.problem.action_dim(), 5.0);
    c.bench_function("rollout_96x12", |b| {
        b.iter(|| {
            f.scenario
                .building
                .simulate(&f.problem.initial_state, black_box(&a), &f.problem.forecast)
                .unwrap()
        })
    });
    let linear = identify_linear(&f.scenario).unwrap();
    c.bench_function("linear_objective_and_adjoint", |b| {
        b.iter(|| linear.objective_and_gradient(black_box(&a), &f.problem).unwrap())
    });
}

fn latent_oracles(c: &mut Criterion) {
    let f = fixture();
    let mut objective = LatentObjective::new(&f.set, &f.problem).unwrap();
    let (t, n) = objective.shape();
    let z = Tensor::filled(t, n, 0.1);
    c.bench_function("optiden_value_and_grad", |b| {
        b.iter(|| objective.value_and_grad(black_box(&z)).unwrap())
    });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let building = &f.scenario.building;
    let problem = &f.problem;
    c.bench_function("optsim_two_point_direction", |b| {
        b.iter(|| {
            zeroth_order_direction(
                |x: &[f64]| {
                    let a = f.set.decode(Group::Action, &Tensor::new(t, n, x.to_vec())?)?;
                    let s = building.simulate(&problem.initial_state, &a, &problem.forecast)?;
                    penalty_objective(&a, &s, problem)
                },
                z.as_slice(),
                0.01,
                &mut rng,
            )
            .unwrap()
        })
    });
}

fn solver_iterations(c: &mut Criterion) {
    let f = fixture();
    let cfg = SolverConfig {
        max_iterations: 3,
        ..SolverConfig::default()
    };
    let mut group = c.benchmark_group("three_iterations");
    group.sample_size(10);
    group.bench_function("groundtruth", |b| {
        b.iter(|| groundtruth_solve(&f.problem, &f.scenario.building, &cfg).unwrap())
    });
    group.bench_function("optiden", |b| {
        b.iter(|| optiden_solve(&f.problem, &f.set, &f.scenario.building, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, rollout, latent_oracles, solver_iterations);
criterion_main!(benches);
