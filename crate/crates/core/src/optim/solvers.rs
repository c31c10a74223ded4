//! The five scheduling methods. All share [`adaptive_descent`]; they differ
//! in the decision space (latent or original actions), the dynamics used
//! while solving, and how the descent direction is obtained.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::descent::{adaptive_descent, DescentOutcome};
use super::layer::build_objective_layer;
use super::linear::LinearModel;
use super::{actual_rollout, cost, penalty_objective, project_actions, CostBreakdown, Method, OptProblem, OptResult, SolverConfig, Timing};
use crate::autodiff::{Axis, Graph, NodeId};
use crate::error::{Error, Result};
use crate::latent::{Group, LatentModelSet};
use crate::tensor::Tensor;
use crate::thermal::BuildingModel;

/// `C̄(ã)` of the latent model as one graph: decoded actions, the latent
/// rollout from `E_s(s₀)` under the encoded forecast, decoded states and the
/// objective layer. Built once per problem; each evaluation rebinds `ã`.
pub struct LatentObjective {
    graph: Graph,
    latent: NodeId,
    actions: NodeId,
    states: NodeId,
    root: NodeId,
    horizon: usize,
    latent_dim: usize,
}

impl LatentObjective {
    pub fn new(set: &LatentModelSet, problem: &OptProblem) -> Result<Self> {
        problem.validate()?;
        let horizon = problem.horizon();
        let dims = set.dims();
        let s0 = set.encode(Group::State, &Tensor::row(problem.initial_state.clone()))?;
        let d_latent = set.encode(Group::Disturbance, &problem.forecast)?;

        let mut g = Graph::new();
        let latent = g.leaf("a_latent", horizon, dims.action);
        let da = set.action.decoder.constants(&mut g);
        let a_norm = set.action.decoder.apply(&mut g, latent, &da);
        let actions = set.normalizer(Group::Action)?.build_denormalize(&mut g, a_norm);

        let f = set.dynamics.constants(&mut g);
        let mut s = g.constant(s0);
        let mut trajectory = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let a_t = g.slice(latent, Axis::Rows, t, 1);
            let d_t = g.constant(d_latent.slice_rows(t, 1)?);
            let z = g.concat(&[s, a_t, d_t], Axis::Cols);
            s = set.dynamics.apply(&mut g, z, &f);
            trajectory.push(s);
        }
        let s_latent = g.concat(&trajectory, Axis::Rows);
        let ds = set.state.decoder.constants(&mut g);
        let s_norm = set.state.decoder.apply(&mut g, s_latent, &ds);
        let states = set.normalizer(Group::State)?.build_denormalize(&mut g, s_norm);
        let root = build_objective_layer(&mut g, problem, actions, states)?;
        Ok(Self {
            graph: g,
            latent,
            actions,
            states,
            root,
            horizon,
            latent_dim: dims.action,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.horizon, self.latent_dim)
    }

    fn bind(&mut self, latent: &Tensor) -> Result<f64> {
        self.graph.bind(self.latent, latent.clone())?;
        self.graph.evaluate()?;
        Ok(self.graph.value(self.root).expect("evaluated").get(0, 0))
    }

    pub fn value(&mut self, latent: &Tensor) -> Result<f64> {
        self.bind(latent)
    }

    pub fn value_and_grad(&mut self, latent: &Tensor) -> Result<(f64, Tensor)> {
        let v = self.bind(latent)?;
        let mut grads = self.graph.backward(self.root)?;
        let g = grads
            .take(self.latent)
            .unwrap_or_else(|| Tensor::zeros(self.horizon, self.latent_dim));
        Ok((v, g))
    }

    /// Decoded actions `a′` and predicted states `s′` at `latent`.
    pub fn decoded(&mut self, latent: &Tensor) -> Result<(Tensor, Tensor)> {
        self.bind(latent)?;
        let get = |id| self.graph.value(id).expect("evaluated").clone();
        Ok((get(self.actions), get(self.states)))
    }
}

/// `ã₀ = E_a(Ā/2)` row by row.
fn latent_start(set: &LatentModelSet, problem: &OptProblem) -> Result<Tensor> {
    set.encode(Group::Action, &problem.action_upper.scale(0.5))
}

fn original_start(problem: &OptProblem) -> Tensor {
    problem.action_upper.add(&problem.action_lower).expect("same shape").scale(0.5)
}

/// Two-point estimate `(f(x + r·u) − f(x))/r · u` with `u ~ U([−1, 1])ⁿ`.
/// Returns `f(x)` and the estimate.
pub fn zeroth_order_direction(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    radius: f64,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<f64>)> {
    let u: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let base = f(x)?;
    let shifted: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + radius * b).collect();
    let slope = (f(&shifted)? - base) / radius;
    Ok((base, u.into_iter().map(|v| slope * v).collect()))
}

fn as_matrix(x: &[f64], shape: (usize, usize)) -> Tensor {
    Tensor::new(shape.0, shape.1, x.to_vec()).expect("solver iterate has the decision shape")
}

struct Solved {
    latent: Option<Tensor>,
    decoded: Tensor,
    predicted: Tensor,
}

fn finish(
    method: Method,
    problem: &OptProblem,
    building: &BuildingModel,
    solved: Solved,
    outcome: DescentOutcome,
    simulator_calls: u64,
    start: Instant,
) -> Result<OptResult> {
    let projected = project_actions(&solved.decoded, problem);
    let (actual_states, act) = actual_rollout(&projected, problem, building)?;
    let dec = cost(&solved.decoded, &solved.predicted, problem)?;
    let total = start.elapsed();
    Ok(OptResult {
        method,
        latent_actions: solved.latent,
        decoded_actions: solved.decoded,
        projected_actions: projected,
        predicted_states: solved.predicted,
        actual_states,
        costs: CostBreakdown::new(dec, act),
        objective: outcome.best_objective,
        iterations: outcome.iterations,
        best_iteration: outcome.best_iteration,
        stop: outcome.stop,
        simulator_calls: simulator_calls + 1,
        log: outcome.log,
        timing: Timing {
            total,
            per_iteration: total / outcome.iterations.max(1) as u32,
        },
    })
}

fn check_dims(problem: &OptProblem, building: &BuildingModel) -> Result<()> {
    problem.validate()?;
    if problem.zones() != building.zones()
        || problem.action_dim() != building.conditioned()
        || problem.forecast.cols() != building.disturbance_dim()
    {
        return Err(Error::shape(
            "problem vs building",
            format!("Z={} A={} D={}", building.zones(), building.conditioned(), building.disturbance_dim()),
            format!("Z={} A={} D={}", problem.zones(), problem.action_dim(), problem.forecast.cols()),
        ));
    }
    Ok(())
}

/// Gradient descent on latent actions through the learned model.
pub fn optiden_solve(
    problem: &OptProblem,
    set: &LatentModelSet,
    building: &BuildingModel,
    cfg: &SolverConfig,
) -> Result<OptResult> {
    check_dims(problem, building)?;
    let start = Instant::now();
    let mut objective = LatentObjective::new(set, problem)?;
    let shape = objective.shape();
    let x0 = latent_start(set, problem)?;
    let outcome = adaptive_descent(x0.into_vec(), cfg, 0.0, Method::OptIden.key(), |_, x| {
        let (v, g) = objective.value_and_grad(&as_matrix(x, shape))?;
        Ok((v, g.into_vec()))
    })?;
    let best = as_matrix(&outcome.best, shape);
    let (decoded, predicted) = objective.decoded(&best)?;
    let solved = Solved {
        latent: Some(best),
        decoded,
        predicted,
    };
    finish(Method::OptIden, problem, building, solved, outcome, 0, start)
}

/// Simulator-evaluated `C̄` of original-space actions under the forecast.
fn simulated_objective(problem: &OptProblem, building: &BuildingModel, a: &Tensor) -> Result<f64> {
    let s = building.simulate(&problem.initial_state, a, &problem.forecast)?;
    penalty_objective(a, &s, problem)
}

/// Zeroth-order descent with momentum on latent actions, decoded and rolled
/// out in the simulator.
pub fn optsim_solve(
    problem: &OptProblem,
    set: &LatentModelSet,
    building: &BuildingModel,
    cfg: &SolverConfig,
) -> Result<OptResult> {
    check_dims(problem, building)?;
    let start = Instant::now();
    let x0 = latent_start(set, problem)?;
    let shape = x0.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut calls = 0u64;
    let outcome = adaptive_descent(x0.into_vec(), cfg, cfg.momentum, Method::OptSim.key(), |_, x| {
        let f = |z: &[f64]| {
            let a = set.decode(Group::Action, &as_matrix(z, shape))?;
            simulated_objective(problem, building, &a)
        };
        calls += 2;
        zeroth_order_direction(f, x, cfg.radius, &mut rng)
    })?;
    let best = as_matrix(&outcome.best, shape);
    let decoded = set.decode(Group::Action, &best)?;
    let predicted = building.simulate(&problem.initial_state, &decoded, &problem.forecast)?;
    let solved = Solved {
        latent: Some(best),
        decoded,
        predicted,
    };
    finish(Method::OptSim, problem, building, solved, outcome, calls + 1, start)
}

/// Zeroth-order descent with momentum directly on the `T × A` actions.
pub fn orisim_solve(problem: &OptProblem, building: &BuildingModel, cfg: &SolverConfig) -> Result<OptResult> {
    check_dims(problem, building)?;
    let start = Instant::now();
    let x0 = original_start(problem);
    let shape = x0.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut calls = 0u64;
    let outcome = adaptive_descent(x0.into_vec(), cfg, cfg.momentum, Method::OriSim.key(), |_, x| {
        calls += 2;
        zeroth_order_direction(
            |z| simulated_objective(problem, building, &as_matrix(z, shape)),
            x,
            cfg.radius,
            &mut rng,
        )
    })?;
    let decoded = as_matrix(&outcome.best, shape);
    let predicted = building.simulate(&problem.initial_state, &decoded, &problem.forecast)?;
    let solved = Solved {
        latent: None,
        decoded,
        predicted,
    };
    finish(Method::OriSim, problem, building, solved, outcome, calls + 1, start)
}

/// Exact-gradient descent on the `T × A` actions through an identified
/// affine model.
pub fn oriiden_solve(
    problem: &OptProblem,
    model: &LinearModel,
    building: &BuildingModel,
    cfg: &SolverConfig,
) -> Result<OptResult> {
    check_dims(problem, building)?;
    let start = Instant::now();
    let x0 = original_start(problem);
    let shape = x0.shape();
    let outcome = adaptive_descent(x0.into_vec(), cfg, 0.0, Method::OriIden.key(), |_, x| {
        let (v, g, _) = model.objective_and_gradient(&as_matrix(x, shape), problem)?;
        Ok((v, g.into_vec()))
    })?;
    let decoded = as_matrix(&outcome.best, shape);
    let predicted = model.rollout(&problem.initial_state, &decoded, &problem.forecast)?;
    let solved = Solved {
        latent: None,
        decoded,
        predicted,
    };
    finish(Method::OriIden, problem, building, solved, outcome, 0, start)
}

/// Gradient descent on the `T × A` actions with forward-difference gradients
/// of the simulator objective: `T·A + 1` rollouts per iteration.
pub fn groundtruth_solve(problem: &OptProblem, building: &BuildingModel, cfg: &SolverConfig) -> Result<OptResult> {
    check_dims(problem, building)?;
    let start = Instant::now();
    let x0 = original_start(problem);
    let shape = x0.shape();
    let h = cfg.fd_step;
    let mut calls = 0u64;
    let outcome = adaptive_descent(x0.into_vec(), cfg, 0.0, Method::GroundTruth.key(), |_, x| {
        let mut probe = as_matrix(x, shape);
        let base = simulated_objective(problem, building, &probe)?;
        let mut grad = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let keep = probe.as_slice()[i];
            probe.as_mut_slice()[i] = keep + h;
            grad.push((simulated_objective(problem, building, &probe)? - base) / h);
            probe.as_mut_slice()[i] = keep;
        }
        calls += x.len() as u64 + 1;
        Ok((base, grad))
    })?;
    let decoded = as_matrix(&outcome.best, shape);
    let predicted = building.simulate(&problem.initial_state, &decoded, &problem.forecast)?;
    let solved = Solved {
        latent: None,
        decoded,
        predicted,
    };
    finish(Method::GroundTruth, problem, building, solved, outcome, calls + 1, start)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::{central_diff_grad, relative_error};
    use crate::latent::{Autoencoder, LatentDims, Normalizer, TrainConfig};
    use crate::nn::{Layer, Mlp};
    use crate::optim::{check_log, oriiden_identify, StopReason};
    use crate::thermal::{generate_dataset, generate_disturbances, BuildingSpec, DisturbanceProfile, ThermostatPolicy};

    fn building(zones: usize) -> BuildingModel {
        BuildingModel::from_spec(&BuildingSpec {
            zones,
            ..BuildingSpec::default()
        })
        .unwrap()
    }

    /// Comfort bounds nobody can leave, so the optimum is `a = 0` whenever
    /// power has a price.
    fn wide_problem(b: &BuildingModel, horizon: usize, price: f64, penalty: f64, rho: f64) -> OptProblem {
        let z = b.zones();
        let a = b.conditioned();
        OptProblem {
            dt_hours: 0.25,
            prices: vec![price; horizon],
            temperature_penalty: vec![penalty; horizon],
            action_penalty: rho,
            comfort_lower: Tensor::filled(horizon, z, -1000.0),
            comfort_upper: Tensor::filled(horizon, z, 1000.0),
            action_lower: Tensor::zeros(horizon, a),
            action_upper: Tensor::filled(horizon, a, 15.0),
            initial_state: vec![22.0; z],
            forecast: generate_disturbances(&DisturbanceProfile::default(), 2, z).slice_rows(40, horizon).unwrap(),
            actual: None,
        }
    }

    fn linear(weight: Tensor) -> Mlp {
        let bias = Tensor::zeros(1, weight.cols());
        Mlp::from_layers(vec![Layer { weight, bias }]).unwrap()
    }

    fn identity_ae(n: usize) -> Autoencoder {
        Autoencoder {
            encoder: linear(Tensor::identity(n)),
            decoder: linear(Tensor::identity(n)),
        }
    }

    /// Lossless autoencoders and persistence dynamics `s' = s`: decoded
    /// actions are the latent actions themselves.
    fn identity_set(b: &BuildingModel) -> LatentModelSet {
        let (z, a, d) = (b.zones(), b.conditioned(), b.disturbance_dim());
        let dyn_w = Tensor::from_fn(z + a + d, z, |r, c| if r == c { 1.0 } else { 0.0 });
        LatentModelSet {
            state: identity_ae(z),
            action: identity_ae(a),
            disturbance: identity_ae(d),
            dynamics: linear(dyn_w),
            normalizers: Some([Normalizer::identity(z), Normalizer::identity(a), Normalizer::identity(d)]),
        }
    }

    /// An untrained network set with normalizers fitted to real data.
    fn random_set(b: &BuildingModel, seed: u64) -> LatentModelSet {
        let cfg = TrainConfig {
            seed,
            dims: LatentDims {
                state: 2,
                action: 2,
                disturbance: 2,
            },
            ..TrainConfig::default()
        };
        let data = generate_dataset(b, &DisturbanceProfile::default(), &ThermostatPolicy::default(), 2).unwrap();
        let mut set = LatentModelSet::new(b.zones(), b.conditioned(), &cfg);
        set.fit_normalizers(&data.transitions().unwrap());
        set
    }

    fn linear_model(b: &BuildingModel) -> LinearModel {
        let data = generate_dataset(b, &DisturbanceProfile::default(), &ThermostatPolicy::default(), 3).unwrap();
        oriiden_identify(&data).unwrap()
    }

    fn run(method: Method, p: &OptProblem, b: &BuildingModel, cfg: &SolverConfig) -> OptResult {
        match method {
            Method::GroundTruth => groundtruth_solve(p, b, cfg),
            Method::OriIden => oriiden_solve(p, &linear_model(b), b, cfg),
            Method::OriSim => orisim_solve(p, b, cfg),
            Method::OptIden => optiden_solve(p, &identity_set(b), b, cfg),
            Method::OptSim => optsim_solve(p, &identity_set(b), b, cfg),
        }
        .unwrap()
    }

    fn norm(t: &Tensor) -> f64 {
        t.norm_sq().sqrt()
    }

    #[test]
    fn zero_objective_stops_early_where_it_started() {
        let b = building(2);
        let p = wide_problem(&b, 4, 0.0, 0.0, 0.0);
        let cfg = SolverConfig::default();
        for m in Method::ALL {
            let r = run(m, &p, &b, &cfg);
            assert_eq!(r.stop, StopReason::EarlyStop, "{m}");
            assert_eq!(r.iterations, cfg.stop_streak + 1, "{m}");
            assert_eq!(r.objective, 0.0, "{m}");
            assert!(r.decoded_actions.as_slice().iter().all(|&v| v == 7.5), "{m} moved");
            check_log(&r.log, &cfg, r.stop).unwrap();
        }
    }

    #[test]
    fn pure_cost_problems_converge_to_zero_power() {
        let b = building(2);
        let p = wide_problem(&b, 4, 1.0, 0.002 * 0.25, 10.0);
        let cfg = SolverConfig {
            step_size: 0.04,
            ..SolverConfig::default()
        };
        for m in [Method::OptIden, Method::OriIden, Method::GroundTruth] {
            let r = run(m, &p, &b, &cfg);
            assert!(norm(&r.decoded_actions) < 0.1, "{m}: ‖a′‖ = {}", norm(&r.decoded_actions));
            assert!(r.costs.sum_act < 0.01, "{m}: {:?}", r.costs);
            check_log(&r.log, &cfg, r.stop).unwrap();
        }
    }

    #[test]
    fn simulator_calls_per_iteration() {
        let b = building(2);
        let p = wide_problem(&b, 4, 0.1, 0.0005, 10.0);
        let cfg = SolverConfig {
            max_iterations: 3,
            ..SolverConfig::default()
        };
        let ta = (p.horizon() * p.action_dim()) as u64;
        // Two more rollouts after the loop: the solved and the actual one.
        let gt = run(Method::GroundTruth, &p, &b, &cfg);
        assert_eq!(gt.simulator_calls, 3 * (ta + 1) + 2);
        for m in [Method::OriSim, Method::OptSim] {
            assert_eq!(run(m, &p, &b, &cfg).simulator_calls, 3 * 2 + 2, "{m}");
        }
    }

    #[test]
    fn optsim_without_clamping_solves_exactly_what_it_gets() {
        let b = building(3);
        let p = wide_problem(&b, 8, 0.1, 0.0005, 10.0);
        let cfg = SolverConfig {
            max_iterations: 40,
            step_size: 0.01,
            ..SolverConfig::default()
        };
        let r = optsim_solve(&p, &identity_set(&b), &b, &cfg).unwrap();
        assert_eq!(r.projected_actions, r.decoded_actions, "projection was not the identity");
        assert!((r.costs.sum_dec - r.costs.sum_act).abs() < 1e-9);
        assert_eq!(r.predicted_states, r.actual_states);
    }

    #[test]
    fn optiden_gradient_matches_central_differences() {
        let b = building(3);
        let p = wide_problem(&b, 6, 0.12, 0.5, 10.0);
        // Tight comfort so the hinge terms are active.
        let p = OptProblem {
            comfort_lower: Tensor::filled(6, 3, 22.5),
            comfort_upper: Tensor::filled(6, 3, 23.0),
            ..p
        };
        for seed in 0..4 {
            let set = random_set(&b, seed);
            let mut obj = LatentObjective::new(&set, &p).unwrap();
            let (t, n) = obj.shape();
            let z = Tensor::from_fn(t, n, |i, j| ((i * n + j + seed as usize) as f64 * 0.61).sin() * 1.5);
            let (_, g) = obj.value_and_grad(&z).unwrap();
            let fd = central_diff_grad(|x| obj.value(x).unwrap(), &z, 1e-5).unwrap();
            let err = relative_error(&g, &fd, 1e-8);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn perturbation_dimension_follows_the_decision_space() {
        let b = building(12);
        let p = wide_problem(&b, 96, 0.1, 0.0005, 10.0);
        let cfg = SolverConfig {
            max_iterations: 1,
            ..SolverConfig::default()
        };
        let mut set = LatentModelSet::new(12, 12, &TrainConfig::default());
        let data = generate_dataset(&b, &DisturbanceProfile::default(), &ThermostatPolicy::default(), 1).unwrap();
        set.fit_normalizers(&data.transitions().unwrap());
        let ori = orisim_solve(&p, &b, &cfg).unwrap();
        let opt = optsim_solve(&p, &set, &b, &cfg).unwrap();
        assert!(ori.latent_actions.is_none());
        assert_eq!(ori.decoded_actions.len(), 1152);
        assert_eq!(opt.latent_actions.as_ref().unwrap().len(), 288);
    }

    #[test]
    fn constant_function_gives_a_zero_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (v, xi) = zeroth_order_direction(|_| Ok(3.25), &[1.0, -2.0, 0.5], 1e-3, &mut rng).unwrap();
        assert_eq!(v, 3.25);
        assert!(xi.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_actions_reproduce_the_free_running_building() {
        let b = building(3);
        let p = wide_problem(&b, 10, 0.1, 0.0005, 10.0);
        let zero = Tensor::zeros(10, 3);
        let (s, c) = actual_rollout(&zero, &p, &b).unwrap();
        assert_eq!(s, b.simulate(&p.initial_state, &zero, &p.forecast).unwrap());
        assert_eq!(c.power, 0.0);
    }

    fn json(r: &OptResult) -> String {
        serde_json::to_string(r).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn estimator_points_along_the_gradient(x in prop::collection::vec(-2.0f64..2.0, 10), seed in any::<u64>()) {
            prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 0.1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = |z: &[f64]| Ok(z.iter().map(|v| v * v).sum::<f64>());
            let mut mean = vec![0.0; x.len()];
            let samples = 10_000;
            for _ in 0..samples {
                let (_, xi) = zeroth_order_direction(f, &x, 1e-3, &mut rng).unwrap();
                for (m, v) in mean.iter_mut().zip(xi) {
                    *m += v / samples as f64;
                }
            }
            let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            let dot: f64 = mean.iter().zip(&grad).map(|(a, b)| a * b).sum();
            let cos = dot / (mean.iter().map(|v| v * v).sum::<f64>().sqrt() * grad.iter().map(|v| v * v).sum::<f64>().sqrt());
            prop_assert!(cos > 0.9, "cosine {cos}");
        }

        #[test]
        fn solvers_are_deterministic_given_the_seed(seed in any::<u64>()) {
            let b = building(2);
            let p = wide_problem(&b, 4, 0.1, 0.0005, 10.0);
            let cfg = SolverConfig { max_iterations: 30, seed, ..SolverConfig::default() };
            for m in Method::ALL {
                let (a, b2) = (run(m, &p, &b, &cfg), run(m, &p, &b, &cfg));
                prop_assert_eq!(json(&a), json(&b2), "{}", m);
                let lo = &p.action_lower;
                let hi = &p.action_upper;
                let feasible = a.projected_actions.as_slice().iter().zip(lo.as_slice()).zip(hi.as_slice()).all(|((v, l), h)| l <= v && v <= h);
                prop_assert!(feasible, "{} left the action box", m);
            }
        }
    }
}
