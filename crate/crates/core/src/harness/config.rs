//! Experiment configuration. Files are TOML; any key left out keeps its
//! default, and `section.key=value` overrides are merged on top.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::TrainConfig;
use crate::optim::{
    ComfortBand, Method, SolverConfig, ACTION_PENALTY, POWER_LIMIT, TEMPERATURE_PENALTY_PER_HOUR,
};
use crate::thermal::{BuildingSpec, DisturbanceProfile, ThermostatPolicy};

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ENV: &str = "LATENTOPT_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DayConfig {
    pub train: usize,
    pub test: usize,
    /// Calendar date of the first generated day.
    pub start_date: NaiveDate,
}

impl Default for DayConfig {
    fn default() -> Self {
        Self {
            train: 61,
            test: 31,
            start_date: NaiveDate::from_ymd_opt(2023, 6, 1).expect("valid date"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub band: ComfortBand,
    /// kW per actuator.
    pub power_limit: f64,
    /// $/(°C²·h); multiplied by the step length.
    pub temperature_penalty_per_hour: f64,
    pub action_penalty: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            band: ComfortBand::default(),
            power_limit: POWER_LIMIT,
            temperature_penalty_per_hour: TEMPERATURE_PENALTY_PER_HOUR,
            action_penalty: ACTION_PENALTY,
        }
    }
}

/// One solver configuration per method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSet {
    pub gt: SolverConfig,
    pub oriiden: SolverConfig,
    pub orisim: SolverConfig,
    pub optiden: SolverConfig,
    pub optsim: SolverConfig,
}

impl Default for SolverSet {
    /// Step sizes picked per method on a training-period day; everything
    /// else is shared.
    fn default() -> Self {
        let with = |step_size| SolverConfig {
            step_size,
            ..SolverConfig::default()
        };
        Self {
            gt: with(3.0),
            oriiden: with(3.0),
            orisim: with(0.01),
            optiden: with(0.03),
            optsim: with(1e-4),
        }
    }
}

impl SolverSet {
    pub fn get(&self, method: Method) -> &SolverConfig {
        match method {
            Method::GroundTruth => &self.gt,
            Method::OriIden => &self.oriiden,
            Method::OriSim => &self.orisim,
            Method::OptIden => &self.optiden,
            Method::OptSim => &self.optsim,
        }
    }

    pub fn get_mut(&mut self, method: Method) -> &mut SolverConfig {
        match method {
            Method::GroundTruth => &mut self.gt,
            Method::OriIden => &mut self.oriiden,
            Method::OriSim => &mut self.orisim,
            Method::OptIden => &mut self.optiden,
            Method::OptSim => &mut self.optsim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigmas: Vec<f64>,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigmas: (1..=10).map(|k| k as f64 / 10.0).collect(),
            seed: 23,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub zones: Vec<usize>,
    pub train_days: usize,
    pub test_days: usize,
    pub epochs: usize,
    /// Latent sizes grow as `(Z / Z_ref)^exponent` from the trained sizes.
    pub dims_exponent: f64,
    /// Solver iterations per timing measurement.
    pub timing_iterations: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            zones: vec![12, 24, 48],
            train_days: 14,
            test_days: 2,
            epochs: 20,
            dims_exponent: 0.5,
            timing_iterations: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub threshold: f64,
    pub epsilon: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            threshold: crate::analysis::ABNORMAL_THRESHOLD,
            epsilon: crate::analysis::ABNORMAL_EPSILON,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    /// Hourly price CSV; the bundled synthetic series when absent.
    pub prices: Option<PathBuf>,
    pub output: PathBuf,
    /// Worker threads for independent solver runs.
    pub threads: usize,
    pub days: DayConfig,
    pub building: BuildingSpec,
    pub weather: DisturbanceProfile,
    pub thermostat: ThermostatPolicy,
    pub train: TrainConfig,
    pub problem: ProblemConfig,
    pub solvers: SolverSet,
    pub noise: NoiseConfig,
    pub scaling: ScalingConfig,
    pub classifier: ClassifierConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            prices: None,
            output: PathBuf::from("out"),
            threads: 1,
            days: DayConfig::default(),
            building: BuildingSpec::default(),
            weather: DisturbanceProfile::default(),
            thermostat: ThermostatPolicy::default(),
            train: TrainConfig::default(),
            problem: ProblemConfig::default(),
            solvers: SolverSet::default(),
            noise: NoiseConfig::default(),
            scaling: ScalingConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value` as a nested table. The value is read as TOML when it parses
/// and as a bare string otherwise.
fn override_table(assignment: &str) -> Result<toml::Table> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
    let mut node = value;
    for part in key.rsplit('.') {
        let mut t = toml::Table::new();
        t.insert(part.to_owned(), node);
        node = toml::Value::Table(t);
    }
    match node {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!(),
    }
}

impl ExperimentConfig {
    /// Defaults, then `text` (TOML), then each `key=value` override.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(Self::default())
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, file);
        for o in overrides {
            merge(&mut table, override_table(o)?);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; a relative price path is resolved against the file's
    /// directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_with(&text, overrides)?;
        if let (Some(p), Some(dir)) = (&cfg.prices, path.parent()) {
            if p.is_relative() {
                cfg.prices = Some(dir.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies the output-directory environment override, if set.
    pub fn with_env_output(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()) {
            self.output = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method {m} listed twice")));
            }
        }
        if self.days.train == 0 || self.days.test == 0 {
            return Err(Error::Config("train and test day counts must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if let Some(p) = &self.prices {
            if !p.is_file() {
                return Err(Error::Config(format!("price file {} does not exist", p.display())));
            }
        }
        if !(self.problem.power_limit > 0.0) {
            return Err(Error::Config("power limit must be positive".into()));
        }
        if !(self.problem.temperature_penalty_per_hour >= 0.0 && self.problem.action_penalty >= 0.0) {
            return Err(Error::Config("penalty weights must be nonnegative".into()));
        }
        if self.noise.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        if self.scaling.zones.iter().any(|&z| z < 2) {
            return Err(Error::Config("scaling zone counts must be at least 2".into()));
        }
        self.train.validate()?;
        for m in Method::ALL {
            self.solvers.get(m).validate()?;
        }
        Ok(())
    }
}
