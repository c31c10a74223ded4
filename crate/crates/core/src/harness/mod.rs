//! Experiment orchestration: scenario generation, model fitting, the
//! multi-day comparison, the noise sweep and the scaling study.

mod config;
mod prices;
mod report;
mod run;

use std::path::{Path, PathBuf};

use chrono::{NaiveDate, TimeDelta};
use serde::{Deserialize, Serialize};

pub use config::{
    ClassifierConfig, DayConfig, ExperimentConfig, NoiseConfig, ProblemConfig, ScalingConfig, SolverSet,
    OUTPUT_ENV,
};
pub use prices::{PriceSeries, BUNDLED_PRICES};
pub use report::render_report;
pub use run::{
    run_noise_sweep, run_scaling, run_suite, scaled_dims, MethodAggregate, MethodRobustness, NoisePoint, NoiseReport,
    ReferencePoint, RunStatus,
    RunSummary, ScalingReport, ScalingRow, SuiteOutcome, SuiteReport, TimingRow, ZoneCount,
};

use crate::error::{Error, Result};
use crate::latent::{evaluate_model, LatentModelSet, ModelMetrics, TrainReport};
use crate::optim::{
    cost, day_problem, groundtruth_solve, optiden_solve, optsim_solve, oriiden_identify, oriiden_solve,
    orisim_solve, DaySetup, LinearModel, Method, OptProblem, OptResult, SolverConfig,
};
use crate::thermal::{add_noise, generate_dataset, BuildingModel, Trajectory, STEPS_PER_DAY};

/// A generated building, its operating history and the price signal.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub config: ExperimentConfig,
    pub building: BuildingModel,
    /// Training days followed by test days.
    pub data: Trajectory,
    pub prices: PriceSeries,
}

impl Scenario {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let building = BuildingModel::from_spec(&config.building)?;
        if (building.dt_hours() * STEPS_PER_DAY as f64 - 24.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "step length {} h does not give {STEPS_PER_DAY} steps per day",
                building.dt_hours()
            )));
        }
        let days = config.days.train + config.days.test;
        let data = generate_dataset(&building, &config.weather, &config.thermostat, days)?;
        let steps_per_hour = (1.0 / building.dt_hours()).round() as usize;
        let prices = match &config.prices {
            Some(p) => PriceSeries::from_path(p, steps_per_hour)?,
            None => PriceSeries::bundled()?,
        };
        let scenario = Self {
            config: config.clone(),
            building,
            data,
            prices,
        };
        for d in 0..config.days.test {
            scenario.prices.day(scenario.test_date(d))?;
        }
        Ok(scenario)
    }

    pub fn train_split(&self) -> Result<Trajectory> {
        self.data.slice(0, self.config.days.train * STEPS_PER_DAY)
    }

    pub fn test_split(&self) -> Result<Trajectory> {
        self.data
            .slice(self.config.days.train * STEPS_PER_DAY, self.config.days.test * STEPS_PER_DAY)
    }

    pub fn test_days(&self) -> usize {
        self.config.days.test
    }

    pub fn test_date(&self, day: usize) -> NaiveDate {
        self.config.days.start_date + TimeDelta::days((self.config.days.train + day) as i64)
    }

    /// Measured history of test day `day`.
    pub fn test_day(&self, day: usize) -> Result<Trajectory> {
        self.check_day(day)?;
        self.data
            .slice((self.config.days.train + day) * STEPS_PER_DAY, STEPS_PER_DAY)
    }

    fn check_day(&self, day: usize) -> Result<()> {
        if day >= self.config.days.test {
            return Err(Error::Config(format!(
                "test day {day} out of range (0..{})",
                self.config.days.test
            )));
        }
        Ok(())
    }

    /// Day-ahead problem of test day `day`. With `noise = Some((σ, seed))`
    /// the solver sees `δ′ = δ·(1+ε)` while the actual rollout uses `δ`.
    pub fn problem(&self, day: usize, noise: Option<(f64, u64)>) -> Result<OptProblem> {
        let history = self.test_day(day)?;
        let start = (self.config.days.train + day) * STEPS_PER_DAY;
        let initial_state = self.data.states.row_slice(start - 1);
        let prices = self.prices.day(self.test_date(day))?;
        let forecast = match noise {
            Some((sigma, seed)) => add_noise(&history.disturbances, sigma, seed),
            None => history.disturbances.clone(),
        };
        let pc = &self.config.problem;
        let mut p = day_problem(&DaySetup {
            dt_hours: self.building.dt_hours(),
            prices: &prices,
            baseline: &history.states,
            band: &pc.band,
            power_limit: pc.power_limit,
            action_dim: self.building.conditioned(),
            initial_state,
            forecast: &forecast,
            actual: noise.map(|_| &history.disturbances),
        })?;
        p.temperature_penalty = vec![pc.temperature_penalty_per_hour * p.dt_hours; p.horizon()];
        p.action_penalty = pc.action_penalty;
        p.validate()?;
        Ok(p)
    }

    /// Cost of the recorded thermostat operation of test day `day`.
    pub fn thermostat_cost(&self, day: usize) -> Result<f64> {
        let h = self.test_day(day)?;
        Ok(cost(&h.actions, &h.states, &self.problem(day, None)?)?.total)
    }
}

/// The latent model set and the linear model, both fitted on the training
/// split.
#[derive(Clone, Debug)]
pub struct Models {
    pub latent: LatentModelSet,
    pub linear: LinearModel,
}

/// What the cached models were fitted from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelKey {
    building: crate::thermal::BuildingSpec,
    weather: crate::thermal::DisturbanceProfile,
    thermostat: crate::thermal::ThermostatPolicy,
    train_days: usize,
    train: crate::latent::TrainConfig,
}

impl ModelKey {
    fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            building: cfg.building.clone(),
            weather: cfg.weather.clone(),
            thermostat: cfg.thermostat.clone(),
            train_days: cfg.days.train,
            train: cfg.train.clone(),
        }
    }
}

pub const LATENT_MODEL_FILE: &str = "latent_model.json";
pub const LINEAR_MODEL_FILE: &str = "linear_model.json";
const MODEL_KEY_FILE: &str = "model_key.json";

/// One-step accuracy of a fitted model on the test split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub latent: ModelMetrics,
    pub linear: ModelMetrics,
}

/// Marks the models in `dir` as fitted from `scenario`'s configuration.
pub fn write_model_key(scenario: &Scenario, dir: &Path) -> Result<()> {
    write_json(&ModelKey::of(&scenario.config), &dir.join(MODEL_KEY_FILE))
}

pub fn train_latent(scenario: &Scenario) -> Result<(LatentModelSet, TrainReport)> {
    let cfg = &scenario.config.train;
    let mut set = LatentModelSet::new(scenario.building.zones(), scenario.building.conditioned(), cfg);
    let report = set.train(&scenario.train_split()?, cfg)?;
    Ok((set, report))
}

pub fn identify_linear(scenario: &Scenario) -> Result<LinearModel> {
    oriiden_identify(&scenario.train_split()?)
}

impl Models {
    pub fn fit(scenario: &Scenario) -> Result<(Self, TrainReport)> {
        let (latent, report) = train_latent(scenario)?;
        let linear = identify_linear(scenario)?;
        Ok((Self { latent, linear }, report))
    }

    /// Loads the models cached in `dir` when they were fitted from the same
    /// configuration, otherwise fits and caches them.
    pub fn load_or_fit(scenario: &Scenario, dir: &Path) -> Result<Self> {
        let key = ModelKey::of(&scenario.config);
        let key_path = dir.join(MODEL_KEY_FILE);
        let cached = std::fs::read(&key_path)
            .ok()
            .and_then(|b| serde_json::from_slice::<ModelKey>(&b).ok())
            .is_some_and(|k| k == key);
        if cached {
            if let (Ok(latent), Ok(linear)) = (
                LatentModelSet::load(&dir.join(LATENT_MODEL_FILE)),
                read_json::<LinearModel>(&dir.join(LINEAR_MODEL_FILE)),
            ) {
                return Ok(Self { latent, linear });
            }
        }
        let (models, report) = Self::fit(scenario)?;
        models.save(scenario, dir)?;
        write_json(&report, &dir.join("train_report.json"))?;
        Ok(models)
    }

    pub fn save(&self, scenario: &Scenario, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.latent.save(&dir.join(LATENT_MODEL_FILE))?;
        write_json(&self.linear, &dir.join(LINEAR_MODEL_FILE))?;
        write_model_key(scenario, dir)
    }

    pub fn accuracy(&self, scenario: &Scenario) -> Result<AccuracyReport> {
        let test = scenario.test_split()?;
        Ok(AccuracyReport {
            latent: evaluate_model(&self.latent, &test)?,
            linear: evaluate_model(&self.linear, &test)?,
        })
    }
}

pub fn solve(
    method: Method,
    problem: &OptProblem,
    models: &Models,
    building: &BuildingModel,
    cfg: &SolverConfig,
) -> Result<OptResult> {
    match method {
        Method::GroundTruth => groundtruth_solve(problem, building, cfg),
        Method::OriIden => oriiden_solve(problem, &models.linear, building, cfg),
        Method::OriSim => orisim_solve(problem, building, cfg),
        Method::OptIden => optiden_solve(problem, &models.latent, building, cfg),
        Method::OptSim => optsim_solve(problem, &models.latent, building, cfg),
    }
}

/// Writes the result of one (day, method) run: the result JSON and its
/// iteration log.
pub fn write_result(result: &OptResult, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", result.method));
    result.save_json(&path)?;
    result.write_log_csv(&dir.join(format!("{}_log.csv", result.method)))?;
    Ok(path)
}

pub fn day_dir(root: &Path, day: usize) -> PathBuf {
    root.join(format!("day_{day:02}"))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.days.train = 3;
        cfg.days.test = 2;
        cfg.building.zones = 3;
        cfg
    }

    #[test]
    fn test_days_follow_the_training_days() {
        let scn = Scenario::prepare(&small_config()).unwrap();
        assert_eq!(scn.data.horizon(), 5 * STEPS_PER_DAY);
        assert_eq!(scn.test_date(0), NaiveDate::from_ymd_opt(2023, 6, 4).unwrap());
        let p = scn.problem(1, None).unwrap();
        assert_eq!(p.horizon(), STEPS_PER_DAY);
        assert_eq!(p.initial_state, scn.data.states.row_slice(4 * STEPS_PER_DAY - 1));
        assert_eq!(p.forecast, scn.test_day(1).unwrap().disturbances);
        assert!(scn.problem(2, None).is_err());
    }

    #[test]
    fn zero_noise_problem_matches_the_noiseless_one() {
        let scn = Scenario::prepare(&small_config()).unwrap();
        let clean = scn.problem(0, None).unwrap();
        let noisy = scn.problem(0, Some((0.0, 5))).unwrap();
        assert_eq!(clean.forecast, noisy.forecast);
        assert_eq!(clean.actual_disturbances(), noisy.actual_disturbances());
        let shaken = scn.problem(0, Some((0.3, 5))).unwrap();
        assert_ne!(shaken.forecast, clean.forecast);
        assert_eq!(shaken.actual_disturbances(), clean.actual_disturbances());
    }

    #[test]
    fn prices_must_cover_the_test_days() {
        let mut cfg = small_config();
        cfg.days.start_date = NaiveDate::from_ymd_opt(2023, 8, 29).unwrap();
        assert!(Scenario::prepare(&cfg).is_err());
    }
}
