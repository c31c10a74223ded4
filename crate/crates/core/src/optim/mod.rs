//! Day-ahead scheduling: the penalty objective, its neural objective layer,
//! the shared adaptive descent loop and the five solvers built on it.

mod descent;
mod layer;
mod linear;
mod solvers;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::thermal::BuildingModel;

pub use descent::{adaptive_descent, check_log, DescentOutcome, IterRecord, LogViolation, StopReason};
pub use layer::{
    build_objective_layer, hinge_square_node, linear_node, objective_graph, weighted_square_node,
    ObjectiveGraph,
};
pub use linear::{oriiden_identify, FitStats, LinearModel};
pub use solvers::{
    groundtruth_solve, optiden_solve, oriiden_solve, orisim_solve, optsim_solve, zeroth_order_direction,
    LatentObjective,
};

/// Temperature penalty weight per degree squared per hour.
pub const TEMPERATURE_PENALTY_PER_HOUR: f64 = 0.002;
/// Action-bound penalty weight per kW squared.
pub const ACTION_PENALTY: f64 = 10.0;
/// Per-zone HVAC power limit in kW.
pub const POWER_LIMIT: f64 = 15.0;

/// One scheduling instance over `horizon` steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptProblem {
    pub dt_hours: f64,
    /// $/kWh, one per step.
    pub prices: Vec<f64>,
    /// $/(°C²·step), one per step.
    pub temperature_penalty: Vec<f64>,
    /// ρ, applied to squared action-bound violations.
    pub action_penalty: f64,
    /// `T × Z`.
    pub comfort_lower: Tensor,
    pub comfort_upper: Tensor,
    /// `T × A`.
    pub action_lower: Tensor,
    pub action_upper: Tensor,
    pub initial_state: Vec<f64>,
    /// `T × D`, what the solvers plan against.
    pub forecast: Tensor,
    /// `T × D`, what the actual rollout experiences; the forecast when `None`.
    pub actual: Option<Tensor>,
}

impl OptProblem {
    pub fn horizon(&self) -> usize {
        self.prices.len()
    }

    pub fn zones(&self) -> usize {
        self.comfort_lower.cols()
    }

    pub fn action_dim(&self) -> usize {
        self.action_lower.cols()
    }

    pub fn actual_disturbances(&self) -> &Tensor {
        self.actual.as_ref().unwrap_or(&self.forecast)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon();
        let z = self.zones();
        let a = self.action_dim();
        if t == 0 {
            return Err(Error::Config("horizon must be at least one step".into()));
        }
        let expect = |name: &str, m: &Tensor, cols: usize| {
            if m.shape() != (t, cols) {
                Err(Error::shape(format!("problem {name}"), format!("{t}x{cols}"), format!("{}x{}", m.rows(), m.cols())))
            } else {
                Ok(())
            }
        };
        expect("comfort_upper", &self.comfort_upper, z)?;
        expect("action_upper", &self.action_upper, a)?;
        let d = self.forecast.cols();
        expect("forecast", &self.forecast, d)?;
        if let Some(actual) = &self.actual {
            expect("actual", actual, d)?;
        }
        if self.temperature_penalty.len() != t {
            return Err(Error::shape("problem temperature_penalty", t, self.temperature_penalty.len()));
        }
        if self.initial_state.len() != z {
            return Err(Error::shape("problem initial_state", z, self.initial_state.len()));
        }
        let ordered = |lo: &Tensor, hi: &Tensor| lo.as_slice().iter().zip(hi.as_slice()).all(|(l, h)| l <= h);
        if !ordered(&self.comfort_lower, &self.comfort_upper) {
            return Err(Error::Config("comfort lower bound exceeds upper bound".into()));
        }
        if !ordered(&self.action_lower, &self.action_upper) {
            return Err(Error::Config("action lower bound exceeds upper bound".into()));
        }
        let finite = self.prices.iter().chain(&self.temperature_penalty).chain(&self.initial_state).all(|v| v.is_finite())
            && self.action_penalty.is_finite()
            && self.dt_hours.is_finite()
            && [&self.comfort_lower, &self.comfort_upper, &self.action_lower, &self.action_upper, &self.forecast]
                .iter()
                .all(|m| m.is_finite());
        if !finite || self.dt_hours <= 0.0 {
            return Err(Error::Config("problem data must be finite with a positive step".into()));
        }
        Ok(())
    }
}

/// Width of the comfort band around a baseline temperature curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComfortBand {
    /// °C either side of the baseline during occupied hours.
    pub occupied: f64,
    /// °C either side of the baseline otherwise.
    pub unoccupied: f64,
    /// Occupied hours are `[start_hour, end_hour)`.
    pub start_hour: f64,
    pub end_hour: f64,
}

impl Default for ComfortBand {
    fn default() -> Self {
        Self {
            occupied: 1.5,
            unoccupied: 2.5,
            start_hour: 8.0,
            end_hour: 20.0,
        }
    }
}

impl ComfortBand {
    /// `(baseline − b(t), baseline + b(t))`, with row `t` at hour `t·dt`
    /// of the day.
    pub fn bounds(&self, baseline: &Tensor, dt_hours: f64) -> (Tensor, Tensor) {
        let width = |t: usize| {
            let hour = (t as f64 * dt_hours) % 24.0;
            if hour >= self.start_hour && hour < self.end_hour {
                self.occupied
            } else {
                self.unoccupied
            }
        };
        let lower = Tensor::from_fn(baseline.rows(), baseline.cols(), |t, i| baseline.get(t, i) - width(t));
        let upper = Tensor::from_fn(baseline.rows(), baseline.cols(), |t, i| baseline.get(t, i) + width(t));
        (lower, upper)
    }
}

/// Inputs for [`day_problem`].
#[derive(Clone, Debug)]
pub struct DaySetup<'a> {
    pub dt_hours: f64,
    pub prices: &'a [f64],
    /// Temperature curve the comfort band is centred on, `T × Z`.
    pub baseline: &'a Tensor,
    pub band: &'a ComfortBand,
    pub power_limit: f64,
    pub action_dim: usize,
    pub initial_state: &'a [f64],
    pub forecast: &'a Tensor,
    pub actual: Option<&'a Tensor>,
}

/// A problem with the standard penalty weights and `[0, power_limit]`
/// action bounds.
pub fn day_problem(setup: &DaySetup<'_>) -> Result<OptProblem> {
    let t = setup.prices.len();
    let (comfort_lower, comfort_upper) = setup.band.bounds(setup.baseline, setup.dt_hours);
    let p = OptProblem {
        dt_hours: setup.dt_hours,
        prices: setup.prices.to_vec(),
        temperature_penalty: vec![TEMPERATURE_PENALTY_PER_HOUR * setup.dt_hours; t],
        action_penalty: ACTION_PENALTY,
        comfort_lower,
        comfort_upper,
        action_lower: Tensor::zeros(t, setup.action_dim),
        action_upper: Tensor::filled(t, setup.action_dim, setup.power_limit),
        initial_state: setup.initial_state.to_vec(),
        forecast: setup.forecast.clone(),
        actual: setup.actual.cloned(),
    };
    p.validate()?;
    Ok(p)
}

/// Power cost, temperature penalty and their sum, in $.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    pub power: f64,
    pub temperature: f64,
    pub total: f64,
}

fn check_shapes(a: &Tensor, s: &Tensor, problem: &OptProblem) -> Result<()> {
    let t = problem.horizon();
    if a.shape() != (t, problem.action_dim()) {
        return Err(Error::shape("actions", format!("{t}x{}", problem.action_dim()), format!("{}x{}", a.rows(), a.cols())));
    }
    if s.shape() != (t, problem.zones()) {
        return Err(Error::shape("states", format!("{t}x{}", problem.zones()), format!("{}x{}", s.rows(), s.cols())));
    }
    Ok(())
}

fn pos_sq(x: f64) -> f64 {
    let p = x.max(0.0);
    p * p
}

pub fn cost(a: &Tensor, s: &Tensor, problem: &OptProblem) -> Result<CostTerms> {
    check_shapes(a, s, problem)?;
    let mut power = 0.0;
    let mut temperature = 0.0;
    for t in 0..problem.horizon() {
        let w = problem.prices[t] * problem.dt_hours;
        power += w * a.row_slice(t).iter().sum::<f64>();
        let viol: f64 = s
            .row_slice(t)
            .iter()
            .zip(problem.comfort_lower.row_slice(t))
            .zip(problem.comfort_upper.row_slice(t))
            .map(|((&x, &lo), &hi)| pos_sq(x - hi) + pos_sq(lo - x))
            .sum();
        temperature += problem.temperature_penalty[t] * viol;
    }
    Ok(CostTerms {
        power,
        temperature,
        total: power + temperature,
    })
}

/// `Σ [a − Ā]₊² + [A̲ − a]₊²`, unweighted.
pub fn action_violation(a: &Tensor, problem: &OptProblem) -> f64 {
    a.as_slice()
        .iter()
        .zip(problem.action_lower.as_slice())
        .zip(problem.action_upper.as_slice())
        .map(|((&x, &lo), &hi)| pos_sq(x - hi) + pos_sq(lo - x))
        .sum()
}

/// `C̄ = cost(a, s) + ρ·Σ([a − Ā]₊² + [A̲ − a]₊²)`.
pub fn penalty_objective(a: &Tensor, s: &Tensor, problem: &OptProblem) -> Result<f64> {
    Ok(cost(a, s, problem)?.total + problem.action_penalty * action_violation(a, problem))
}

pub fn project_actions(a: &Tensor, problem: &OptProblem) -> Tensor {
    let mut out = a.clone();
    for ((v, &lo), &hi) in out
        .as_mut_slice()
        .iter_mut()
        .zip(problem.action_lower.as_slice())
        .zip(problem.action_upper.as_slice())
    {
        *v = v.clamp(lo, hi);
    }
    out
}

/// Ground-truth states and costs of `actions` under the actual disturbances.
pub fn actual_rollout(actions: &Tensor, problem: &OptProblem, building: &BuildingModel) -> Result<(Tensor, CostTerms)> {
    let s = building.simulate(&problem.initial_state, actions, problem.actual_disturbances())?;
    let c = cost(actions, &s, problem)?;
    Ok((s, c))
}

/// Step and stopping parameters of the iterative solvers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub step_size: f64,
    /// Consecutive objective increases that halve the step.
    pub halving_streak: usize,
    /// Consecutive small changes that stop the loop.
    pub stop_streak: usize,
    /// $; a change of at most this size counts toward the stop streak.
    pub stop_delta: f64,
    /// Perturbation radius of the two-point estimator.
    pub radius: f64,
    /// Weight on the previous displacement in the zeroth-order methods.
    pub momentum: f64,
    /// Forward-difference step of the ground-truth gradient, kW.
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            step_size: 0.05,
            halving_streak: 5,
            stop_streak: 50,
            stop_delta: 0.01,
            radius: 0.01,
            momentum: 0.9,
            fd_step: 1e-3,
            seed: 17,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations >= 1
            && self.step_size > 0.0
            && self.radius > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.halving_streak >= 1
            && self.stop_streak >= 1
            && self.stop_delta >= 0.0
            && self.fd_step > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solver configuration {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(rename = "gt")]
    GroundTruth,
    OriIden,
    OriSim,
    OptIden,
    OptSim,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::GroundTruth,
        Method::OriIden,
        Method::OriSim,
        Method::OptIden,
        Method::OptSim,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Method::GroundTruth => "gt",
            Method::OriIden => "oriiden",
            Method::OriSim => "orisim",
            Method::OptIden => "optiden",
            Method::OptSim => "optsim",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}' (expected gt, oriiden, orisim, optiden or optsim)")))
    }
}

/// Solved (`dec`) and actual (`act`) costs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub pow_dec: f64,
    pub pow_act: f64,
    pub tem_dec: f64,
    pub tem_act: f64,
    pub sum_dec: f64,
    pub sum_act: f64,
}

impl CostBreakdown {
    pub fn new(dec: CostTerms, act: CostTerms) -> Self {
        Self {
            pow_dec: dec.power,
            pow_act: act.power,
            tem_dec: dec.temperature,
            tem_act: act.temperature,
            sum_dec: dec.total,
            sum_act: act.total,
        }
    }
}

/// Wall-clock measurements; excluded from serialized results so reruns are
/// byte-identical.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub total: Duration,
    pub per_iteration: Duration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub method: Method,
    /// `ã*`, for the latent-space methods.
    pub latent_actions: Option<Tensor>,
    /// `a′`.
    pub decoded_actions: Tensor,
    /// `a″`.
    pub projected_actions: Tensor,
    /// `s′`, from the solver's own dynamics under `a′`.
    pub predicted_states: Tensor,
    /// `s″`, from the ground truth under `a″`.
    pub actual_states: Tensor,
    pub costs: CostBreakdown,
    /// Penalty objective of the returned iterate under the solver's dynamics.
    pub objective: f64,
    pub iterations: usize,
    pub best_iteration: usize,
    pub stop: StopReason,
    pub simulator_calls: u64,
    pub log: Vec<IterRecord>,
    #[serde(skip)]
    pub timing: Timing,
}

impl OptResult {
    /// Lowest logged objective at or before iteration `k`.
    pub fn best_objective_within(&self, k: usize) -> Option<f64> {
        self.log
            .iter()
            .take_while(|r| r.iter <= k)
            .map(|r| r.objective)
            .reduce(f64::min)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }

    /// The iteration log as `iter,objective,step_size` rows.
    pub fn write_log_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "objective", "step_size"])?;
        for r in &self.log {
            w.serialize((r.iter, r.objective, r.step_size))?;
        }
        w.flush()?;
        Ok(())
    }
}
