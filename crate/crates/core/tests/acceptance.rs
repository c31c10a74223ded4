//! Acceptance run on the 12-zone desk scenario: 61 training days, 5 test
//! days, default solver settings. Prints one PASS/FAIL line per criterion.
//!
//! Failing criteria do not fail `cargo test`; set `LATENTOPT_STRICT=1` to
//! turn any FAIL into a nonzero exit. Outputs are kept under
//! `$CARGO_TARGET_TMPDIR/acceptance` for inspection.

use std::path::PathBuf;
use std::time::Instant;

use latentopt::analysis::{clamp_branches, decision_errors, latent_errors, Clamp};
use latentopt::autodiff::{central_diff_grad, relative_error};
use latentopt::harness::{
    run_noise_sweep, run_scaling, run_suite, scaled_dims, ExperimentConfig, Models, Scenario, SuiteOutcome,
};
use latentopt::latent::{Architecture, Group, LatentDims, LatentModelSet, TrainConfig};
use latentopt::optim::{check_log, cost, objective_graph, penalty_objective, LatentObjective, Method, OptProblem};
use latentopt::thermal::{generate_dataset, BuildingModel, BuildingSpec, DisturbanceProfile, ThermostatPolicy};
use latentopt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

struct Ledger {
    lines: Vec<(usize, &'static str, Outcome, f64)>,
}

impl Ledger {
    fn record(&mut self, id: usize, name: &'static str, start: Instant, o: Outcome) {
        let secs = start.elapsed().as_secs_f64();
        println!(
            "{} [{id:>2}] {name}: {} ({secs:.1} s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        self.lines.push((id, name, o, secs));
    }
}

/// Central differences at `h`, re-probed at `h·1e-3` on coordinates where
/// the estimates at `h` and `h/2` disagree: there the probe interval
/// straddles a ReLU kink and neither estimate is a derivative. Returns the
/// estimate and the number of re-probed coordinates.
fn kink_aware_central_diff(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> (Tensor, usize) {
    let coarse = central_diff_grad(&mut f, x, h).unwrap();
    let fine = central_diff_grad(&mut f, x, h / 2.0).unwrap();
    let mut out = coarse.clone();
    let mut probe = x.clone();
    let mut refined = 0;
    for i in 0..x.len() {
        let (c, m) = (coarse.as_slice()[i], fine.as_slice()[i]);
        if (c - m).abs() <= 1e-6 * (c.abs() + 1.0) {
            continue;
        }
        refined += 1;
        let step = h * 1e-3;
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - step;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (up - down) / (2.0 * step);
    }
    (out, refined)
}

/// Criterion 1: Parameter gradients of the multi-task loss on small networks, and
/// latent-action gradients of the desk OptIden objective.
fn gradient_oracle(models: &Models, scenario: &Scenario) -> Outcome {
    let building = BuildingModel::from_spec(&BuildingSpec {
        zones: 3,
        ..BuildingSpec::default()
    })
    .unwrap();
    let data = generate_dataset(&building, &DisturbanceProfile::default(), &ThermostatPolicy::default(), 1).unwrap();
    let mut worst_loss: f64 = 0.0;
    for draw in 0..20u64 {
        let cfg = TrainConfig {
            seed: draw,
            dims: LatentDims {
                state: 2,
                action: 2,
                disturbance: 2,
            },
            architecture: Architecture {
                state_hidden: vec![6],
                action_hidden: vec![5],
                disturbance_hidden: vec![8],
                dynamics_hidden: vec![7],
            },
            ..TrainConfig::default()
        };
        let batch = data.slice(4 * draw as usize, 13).unwrap().transitions().unwrap();
        let mut set = LatentModelSet::new(3, 3, &cfg);
        set.fit_normalizers(&data.transitions().unwrap());
        // Nonzero biases keep idle (all-zero) actions off ReLU kinks.
        for (k, p) in set.params_mut().into_iter().enumerate() {
            for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
                *v += 0.05 * ((k * 31 + i * 7 + draw as usize) as f64).sin();
            }
        }
        let omega = cfg.omega;
        let (_, grads) = set.multi_task_loss(&batch, omega).unwrap();
        let analytic = Tensor::row(grads.iter().flat_map(|g| g.as_slice().to_vec()).collect());
        let mut numeric = Vec::new();
        for k in 0..grads.len() {
            let p0 = set.params()[k].clone();
            let fd = central_diff_grad(
                |p| {
                    let mut s = set.clone();
                    s.params_mut()[k].as_mut_slice().copy_from_slice(p.as_slice());
                    let (lm, lv) = s.loss_terms(&batch).unwrap();
                    omega * lm + (1.0 - omega) * lv
                },
                &p0,
                1e-5,
            )
            .unwrap();
            numeric.extend_from_slice(fd.as_slice());
        }
        worst_loss = worst_loss.max(relative_error(&analytic, &Tensor::row(numeric), 1e-8));
    }

    let problem = scenario.problem(0, None).unwrap();
    let mut objective = LatentObjective::new(&models.latent, &problem).unwrap();
    let (t, n) = objective.shape();
    let start = models.latent.encode(Group::Action, &problem.action_upper.scale(0.5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_rollout: f64 = 0.0;
    let mut refined = 0;
    for _ in 0..20 {
        let z = Tensor::from_fn(t, n, |i, j| start.get(i, j) + rng.random_range(-0.5..0.5));
        let (_, g) = objective.value_and_grad(&z).unwrap();
        let (fd, r) = kink_aware_central_diff(|x| objective.value(x).unwrap(), &z, 1e-5);
        refined += r;
        worst_rollout = worst_rollout.max(relative_error(&g, &fd, 1e-8));
    }
    outcome(
        worst_loss < 1e-5 && worst_rollout < 1e-4,
        format!(
            "worst relative error {worst_loss:.2e} (loss, < 1e-5), {worst_rollout:.2e} (full rollout, < 1e-4) \
             over 20 draws each; {refined} of {} rollout coordinates re-probed at a ReLU kink",
            20 * t * n
        ),
    )
}

/// Criterion 2: Graph-evaluated vs direct penalty objective on random instances.
fn objective_layer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng.random_range(1..=12);
        let z = rng.random_range(1..=5);
        let a = rng.random_range(1..=5);
        let mut fill = |r: usize, c: usize, lo: f64, hi: f64| Tensor::from_fn(r, c, |_, _| rng.random_range(lo..hi));
        let comfort_lower = fill(t, z, 19.0, 22.0);
        let comfort_upper = comfort_lower.add(&fill(t, z, 0.0, 4.0)).unwrap();
        let problem = OptProblem {
            dt_hours: 0.25,
            prices: fill(1, t, 0.0, 0.3).into_vec(),
            temperature_penalty: fill(1, t, 0.0, 0.01).into_vec(),
            action_penalty: 10.0,
            comfort_lower,
            comfort_upper,
            action_lower: Tensor::zeros(t, a),
            action_upper: Tensor::filled(t, a, 15.0),
            initial_state: vec![22.0; z],
            forecast: Tensor::zeros(t, 1),
            actual: None,
        };
        let actions = fill(t, a, -3.0, 18.0);
        let states = fill(t, z, 16.0, 28.0);
        let graph = objective_graph(&problem).unwrap().evaluate(&actions, &states).unwrap();
        let direct = penalty_objective(&actions, &states, &problem).unwrap();
        worst = worst.max((graph - direct).abs());
    }
    outcome(worst <= 1e-9, format!("largest |graph − direct| {worst:.2e} over 100 instances (≤ 1e-9)"))
}

/// Criterion 3: Test one-step RMSE of the latent model vs the linear model.
fn model_accuracy(models: &Models, scenario: &Scenario) -> Outcome {
    let acc = models.accuracy(scenario).unwrap();
    let (latent, linear) = (acc.latent.rmse_summary.mean, acc.linear.rmse_summary.mean);
    outcome(
        latent <= 0.9 * linear,
        format!(
            "latent RMSE {latent:.4} °C vs linear {linear:.4} °C ({:+.1}%, needs ≤ −10%)",
            100.0 * (latent / linear - 1.0)
        ),
    )
}

/// Criterion 4: Latent/original variable ratio of every shipped configuration.
fn dimension_reduction(models: &Models, config: &ExperimentConfig) -> Outcome {
    let mut worst: f64 = models.latent.reduction_ratio();
    let mut parts = vec![format!("desk {:.4}", worst)];
    let base = config.train.dims;
    for &z in &config.scaling.zones {
        let dims = scaled_dims(base, 12, z, config.scaling.dims_exponent);
        let ratio = dims.total() as f64 / (z + z + 1 + 2 * z) as f64;
        worst = worst.max(ratio);
        parts.push(format!("{z} zones {ratio:.4}"));
    }
    let large = LatentModelSet::new(90, 80, &TrainConfig::ninety_zone());
    let (s, a, d) = large.original_dims();
    let recorded = (large.dims().total(), s + a + d);
    parts.push(format!("90-zone metadata {}/{}", recorded.0, recorded.1));
    outcome(worst <= 0.2 && recorded == (13, 351), parts.join(", "))
}

fn mean_sum_act(suite: &SuiteOutcome, m: Method) -> f64 {
    let a = suite.report.aggregate.iter().find(|a| a.method == m).unwrap();
    if a.failed > 0 {
        f64::NAN
    } else {
        a.sum_act.mean
    }
}

/// Criterion 5: Ordering of mean actual cost across methods.
fn cost_ordering(suite: &SuiteOutcome) -> Outcome {
    let c = |m| mean_sum_act(suite, m);
    let (gt, oi, os, pi, ps) = (c(Method::GroundTruth), c(Method::OriIden), c(Method::OriSim), c(Method::OptIden), c(Method::OptSim));
    let first = gt <= pi.min(ps);
    let second = pi.max(ps) < oi.min(os);
    outcome(
        first && second,
        format!(
            "mean Sum_act gt {gt:.3}, oriiden {oi:.3}, orisim {os:.3}, optiden {pi:.3}, optsim {ps:.3}; \
             gt ≤ min(opt*) {first}, max(opt*) < min(ori*) {second}"
        ),
    )
}

/// Criterion 6: OptSim solved/actual consistency.
fn optsim_consistency(scenario: &Scenario, suite: &SuiteOutcome) -> Outcome {
    let mut identity_runs = 0;
    let mut worst: f64 = 0.0;
    for ((_, m), r) in &suite.results {
        if *m == Method::OptSim && r.projected_actions == r.decoded_actions {
            identity_runs += 1;
            worst = worst.max((r.costs.sum_dec - r.costs.sum_act).abs());
        }
    }
    // Every stored run clamps somewhere, so also solve "as if" the projected
    // actions were the decision: then the projection is the identity.
    let mut as_if: f64 = 0.0;
    for ((d, m), r) in &suite.results {
        if *m != Method::OptSim {
            continue;
        }
        let problem = scenario.problem(*d, None).unwrap();
        let a = &r.projected_actions;
        let s = scenario.building.simulate(&problem.initial_state, a, &problem.forecast).unwrap();
        let dec = cost(a, &s, &problem).unwrap().total;
        as_if = as_if.max((dec - r.costs.sum_act).abs());
    }
    let gap = |m: Method| suite.report.aggregate.iter().find(|a| a.method == m).unwrap().dec_act_gap;
    let (sim, iden) = (gap(Method::OptSim), gap(Method::OptIden));
    outcome(
        worst < 1e-9 && as_if < 1e-9 && sim < iden,
        format!(
            "{identity_runs} stored OptSim runs unclamped (largest |dec − act| {worst:.2e}); \
             |dec − act| at the projected actions {as_if:.2e}; mean gap optsim {sim:.4} < optiden {iden:.4}"
        ),
    )
}

/// Criterion 7: OptSim after 500 iterations vs OriSim after 2000.
fn convergence(suite: &SuiteOutcome, days: usize) -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for d in 0..days {
        let (Some(sim), Some(ori)) = (suite.results.get(&(d, Method::OptSim)), suite.results.get(&(d, Method::OriSim))) else {
            continue;
        };
        let (a, b) = (sim.best_objective_within(500).unwrap(), ori.best_objective_within(2000).unwrap());
        if a < b {
            wins += 1;
        }
        pairs.push(format!("{a:.1}/{b:.1}"));
    }
    outcome(wins >= 4, format!("OptSim@500 < OriSim@2000 on {wins} of {days} days ({})", pairs.join(", ")))
}

/// Criterion 8: Step-size and stopping rules in every iteration log.
fn descent_mechanics(suite: &SuiteOutcome, config: &ExperimentConfig) -> Outcome {
    let mut bad = Vec::new();
    let mut halvings = 0;
    let mut early = 0;
    for ((d, m), r) in &suite.results {
        if let Err(v) = check_log(&r.log, config.solvers.get(*m), r.stop) {
            bad.push(format!("day {d} {m}: {v:?}"));
        }
        halvings += r.log.windows(2).filter(|w| w[1].step_size < w[0].step_size).count();
        early += usize::from(r.stop == latentopt::optim::StopReason::EarlyStop);
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} logs consistent ({halvings} halvings, {early} early stops)", suite.results.len())
        } else {
            bad.join("; ")
        },
    )
}

/// Criterion 9: Per-iteration wall time of the ground truth vs OptIden.
fn timing(suite: &SuiteOutcome) -> Outcome {
    let per = |m: Method| suite.timing.iter().find(|t| t.method == m).unwrap().per_iteration_seconds;
    let (gt, iden) = (per(Method::GroundTruth), per(Method::OptIden));
    let ratio = gt / iden;
    outcome(
        ratio >= 50.0,
        format!("gt {:.2} ms vs optiden {:.3} ms per iteration: {ratio:.1}× (needs ≥ 50×)", gt * 1e3, iden * 1e3),
    )
}

/// Criterion 10: Spread of mean actual cost over the noise levels.
fn noise_robustness(scenario: &Scenario, models: &Models, out: &std::path::Path) -> Outcome {
    let mut scn = scenario.clone();
    scn.config.methods = vec![Method::OriIden, Method::OptIden, Method::OptSim];
    let sigmas = scn.config.noise.sigmas.clone();
    let report = run_noise_sweep(&scn, models, &sigmas, out).unwrap();
    let std = |m| report.robustness_of(m).and_then(|r| r.std_over_sigma).unwrap_or(f64::NAN);
    let (oi, pi, ps) = (std(Method::OriIden), std(Method::OptIden), std(Method::OptSim));
    outcome(
        pi < oi && ps < oi,
        format!("std of mean Sum_act over σ ∈ {sigmas:?}: optiden {pi:.4}, optsim {ps:.4}, oriiden {oi:.4}"),
    )
}

/// Criterion 11: Latent error identity, projection branches and recomputed gaps.
fn error_identities(models: &Models, scenario: &Scenario, suite: &SuiteOutcome) -> Outcome {
    let latent = latent_errors(&models.latent, &scenario.test_split().unwrap()).unwrap();
    let mut worst = latent.identity_residual;
    for ((d, _), r) in &suite.results {
        let problem = scenario.problem(*d, None).unwrap();
        let e = decision_errors(r, &problem, Some(&scenario.building)).unwrap();
        worst = worst
            .max(e.projection_residual)
            .max(e.cost_residual)
            .max(e.simulation_residual.unwrap_or(0.0))
            .max((e.objective - (r.costs.sum_act - r.costs.sum_dec)).abs());
        let branches = clamp_branches(&r.decoded_actions, &problem);
        for (i, b) in branches.iter().enumerate() {
            let a = r.decoded_actions.as_slice()[i];
            let expected = match b {
                Clamp::Interior => 0.0,
                Clamp::Lower => problem.action_lower.as_slice()[i] - a,
                Clamp::Upper => problem.action_upper.as_slice()[i] - a,
            };
            worst = worst.max((e.action.as_slice()[i] - expected).abs());
        }
    }
    outcome(
        worst <= 1e-9,
        format!(
            "largest residual {worst:.2e} (latent identity {:.2e}) over {} stored results (≤ 1e-9)",
            latent.identity_residual,
            suite.results.len()
        ),
    )
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&out);
    let mut config = ExperimentConfig::default();
    config.days.test = 5;
    config.threads = 1;
    config.output = out.clone();

    let begin = Instant::now();
    let scenario = Scenario::prepare(&config).expect("scenario");
    let (models, _) = Models::fit(&scenario).expect("model fit");
    println!("models fitted in {:.1} s; outputs under {}", begin.elapsed().as_secs_f64(), out.display());
    let t = Instant::now();
    let suite = run_suite(&scenario, &models, &out.join("suite")).expect("suite");
    println!("5-day suite in {:.1} s", t.elapsed().as_secs_f64());

    let mut ledger = Ledger { lines: Vec::new() };
    let t = Instant::now();
    ledger.record(1, "gradient oracle", t, gradient_oracle(&models, &scenario));
    let t = Instant::now();
    ledger.record(2, "objective-layer equivalence", t, objective_layer());
    let t = Instant::now();
    ledger.record(3, "model-accuracy direction", t, model_accuracy(&models, &scenario));
    let t = Instant::now();
    ledger.record(4, "dimension reduction", t, dimension_reduction(&models, &config));
    let t = Instant::now();
    ledger.record(5, "cost ordering", t, cost_ordering(&suite));
    let t = Instant::now();
    ledger.record(6, "OptSim dec/act consistency", t, optsim_consistency(&scenario, &suite));
    let t = Instant::now();
    ledger.record(7, "convergence behavior", t, convergence(&suite, scenario.test_days()));
    let t = Instant::now();
    ledger.record(8, "descent mechanics", t, descent_mechanics(&suite, &config));
    let t = Instant::now();
    ledger.record(9, "timing direction", t, timing(&suite));
    let t = Instant::now();
    ledger.record(10, "noise robustness direction", t, noise_robustness(&scenario, &models, &out.join("noise")));
    let t = Instant::now();
    ledger.record(11, "error identities", t, error_identities(&models, &scenario, &suite));

    // Not a criterion: the per-iteration gap should widen with the zone count.
    let t = Instant::now();
    let mut scaling = config.clone();
    scaling.scaling.zones = vec![12, 24];
    if let Ok(report) = run_scaling(&scaling, &scaling.scaling.zones, &out.join("scaling")) {
        for row in &report.rows {
            if let (Some(gt), Some(iden)) = (row.gt_per_iteration_seconds, row.optiden_per_iteration_seconds) {
                println!("info: {} zones, gt/optiden per-iteration ratio {:.1}×", row.zones, gt / iden);
            }
        }
        println!("info: scaling run in {:.1} s", t.elapsed().as_secs_f64());
    }

    let passed = ledger.lines.iter().filter(|l| l.2.passed).count();
    println!("{passed} of {} criteria passed in {:.1} s", ledger.lines.len(), begin.elapsed().as_secs_f64());
    if passed < ledger.lines.len() && std::env::var("LATENTOPT_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
