//! Ground-truth multi-zone building: a nonlinear RC thermal network stepped
//! with explicit Euler, plus synthetic weather/occupancy, historical data
//! generation under a hysteresis thermostat, and multiplicative noise.
//!
//! Disturbance rows use the layout `[outdoor | solar × Z | occupancy × Z]`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Steps per day at the 15-minute resolution.
pub const STEPS_PER_DAY: usize = 96;

/// Parameters from which a [`BuildingModel`] is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildingSpec {
    pub zones: usize,
    /// Number of conditioned zones; the first `conditioned` zones carry HVAC.
    pub conditioned: Option<usize>,
    pub kappa: f64,
    pub cop: f64,
    pub dt_hours: f64,
    pub seed: u64,
    pub capacity_range: (f64, f64),
    pub coupling_range: (f64, f64),
    pub envelope_range: (f64, f64),
    pub solar_gain_range: (f64, f64),
    /// Zone `i` is coupled to `i + k` for every offset `k`.
    pub coupling_offsets: Vec<usize>,
}

impl Default for BuildingSpec {
    fn default() -> Self {
        Self {
            zones: 12,
            conditioned: None,
            kappa: 0.3,
            cop: 3.6,
            dt_hours: 0.25,
            seed: 7,
            capacity_range: (1.5, 3.0),
            coupling_range: (0.05, 0.2),
            envelope_range: (0.08, 0.15),
            solar_gain_range: (0.5, 1.0),
            coupling_offsets: vec![1, 4],
        }
    }
}

impl BuildingSpec {
    pub fn conditioned_zones(&self) -> usize {
        self.conditioned.unwrap_or(self.zones)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildingModel {
    zones: usize,
    conditioned: usize,
    /// kWh/°C
    capacity: Vec<f64>,
    /// Undirected couplings `(i, j, U_ij)` with `i < j`, kW/°C.
    couplings: Vec<(usize, usize, f64)>,
    /// kW/°C
    envelope: Vec<f64>,
    solar_gain: Vec<f64>,
    cop: f64,
    dt_hours: f64,
    kappa: f64,
    #[serde(skip)]
    neighbours: Vec<Vec<(usize, f64)>>,
}

#[derive(Clone, Debug)]
pub struct BuildingParams {
    pub conditioned: usize,
    pub capacity: Vec<f64>,
    pub couplings: Vec<(usize, usize, f64)>,
    pub envelope: Vec<f64>,
    pub solar_gain: Vec<f64>,
    pub cop: f64,
    pub dt_hours: f64,
    pub kappa: f64,
}

impl BuildingModel {
    pub fn new(p: BuildingParams) -> Result<Self> {
        let zones = p.capacity.len();
        let bad = |m: String| Err(Error::Building(m));
        if zones == 0 {
            return bad("at least one zone is required".into());
        }
        if p.conditioned > zones {
            return bad(format!("{} conditioned zones exceed {zones} zones", p.conditioned));
        }
        if p.envelope.len() != zones || p.solar_gain.len() != zones {
            return bad("per-zone parameter lengths differ".into());
        }
        if p.capacity.iter().any(|&c| !(c > 0.0)) {
            return bad("heat capacities must be positive".into());
        }
        if p.envelope.iter().any(|&u| !(u >= 0.0)) || !(p.kappa >= 0.0) {
            return bad("conductances and kappa must be nonnegative".into());
        }
        if !(p.dt_hours > 0.0) || !(p.cop > 0.0) {
            return bad("time step and COP must be positive".into());
        }
        let mut neighbours = vec![Vec::new(); zones];
        let mut couplings = Vec::with_capacity(p.couplings.len());
        for &(i, j, u) in &p.couplings {
            if i == j || i >= zones || j >= zones || !(u >= 0.0) {
                return bad(format!("invalid coupling ({i}, {j}, {u})"));
            }
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            if couplings.iter().any(|&(x, y, _)| (x, y) == (a, b)) {
                return bad(format!("duplicate coupling ({a}, {b})"));
            }
            couplings.push((a, b, u));
            neighbours[a].push((b, u));
            neighbours[b].push((a, u));
        }
        let model = Self {
            zones,
            conditioned: p.conditioned,
            capacity: p.capacity,
            couplings,
            envelope: p.envelope,
            solar_gain: p.solar_gain,
            cop: p.cop,
            dt_hours: p.dt_hours,
            kappa: p.kappa,
            neighbours,
        };
        for i in 0..zones {
            let ratio = model.stability_ratio(i);
            if ratio >= 1.0 {
                return bad(format!("explicit update unstable at zone {i}: ratio {ratio:.3} >= 1"));
            }
        }
        Ok(model)
    }

    pub fn from_spec(spec: &BuildingSpec) -> Result<Self> {
        if spec.zones < 1 {
            return Err(Error::Building("zone count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let z = spec.zones;
        let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let capacity: Vec<f64> = (0..z).map(|_| draw(spec.capacity_range)).collect();
        let mut couplings = Vec::new();
        for i in 0..z {
            for &k in &spec.coupling_offsets {
                if k > 0 && i + k < z {
                    couplings.push((i, i + k, draw(spec.coupling_range)));
                }
            }
        }
        let envelope = (0..z).map(|_| draw(spec.envelope_range)).collect();
        let solar_gain = (0..z).map(|_| draw(spec.solar_gain_range)).collect();
        Self::new(BuildingParams {
            conditioned: spec.conditioned_zones(),
            capacity,
            couplings,
            envelope,
            solar_gain,
            cop: spec.cop,
            dt_hours: spec.dt_hours,
            kappa: spec.kappa,
        })
    }

    /// Rebuilds the adjacency lists after deserialization.
    pub fn validated(self) -> Result<Self> {
        Self::new(BuildingParams {
            conditioned: self.conditioned,
            capacity: self.capacity,
            couplings: self.couplings,
            envelope: self.envelope,
            solar_gain: self.solar_gain,
            cop: self.cop,
            dt_hours: self.dt_hours,
            kappa: self.kappa,
        })
    }

    /// `Δt·(Σⱼ Uᵢⱼ + Uᵢ,out)/Cᵢ`, which must stay below 1.
    pub fn stability_ratio(&self, zone: usize) -> f64 {
        let total: f64 = self.neighbours[zone].iter().map(|(_, u)| u).sum::<f64>() + self.envelope[zone];
        self.dt_hours * total / self.capacity[zone]
    }

    pub fn zones(&self) -> usize {
        self.zones
    }

    pub fn conditioned(&self) -> usize {
        self.conditioned
    }

    pub fn disturbance_dim(&self) -> usize {
        1 + 2 * self.zones
    }

    pub fn dt_hours(&self) -> f64 {
        self.dt_hours
    }

    pub fn cop(&self) -> f64 {
        self.cop
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn capacity(&self) -> &[f64] {
        &self.capacity
    }

    pub fn envelope(&self) -> &[f64] {
        &self.envelope
    }

    pub fn couplings(&self) -> &[(usize, usize, f64)] {
        &self.couplings
    }

    /// One explicit-Euler step written into `next`.
    pub fn step_into(&self, s: &[f64], a: &[f64], d: &[f64], next: &mut [f64]) -> Result<()> {
        let z = self.zones;
        if s.len() != z || a.len() != self.conditioned || d.len() != 1 + 2 * z || next.len() != z {
            return Err(Error::shape(
                "BuildingModel::step",
                format!("s:{z} a:{} d:{}", self.conditioned, 1 + 2 * z),
                format!("s:{} a:{} d:{}", s.len(), a.len(), d.len()),
            ));
        }
        if !(s.iter().chain(a).chain(d).all(|v| v.is_finite())) {
            return Err(Error::Simulation {
                step: 0,
                message: "non-finite input".into(),
            });
        }
        let d_out = d[0];
        for i in 0..z {
            let si = s[i];
            let mut flux: f64 = self.neighbours[i].iter().map(|&(j, u)| u * (s[j] - si)).sum();
            let gap = d_out - si;
            flux += self.envelope[i] * gap;
            flux += self.solar_gain[i] * d[1 + i] + d[1 + z + i];
            if i < self.conditioned {
                flux -= self.cop * a[i];
            }
            flux += self.kappa * gap * gap.abs() / 20.0;
            next[i] = si + self.dt_hours / self.capacity[i] * flux;
        }
        Ok(())
    }

    pub fn step(&self, s: &[f64], a: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        let mut next = vec![0.0; self.zones];
        self.step_into(s, a, d, &mut next)?;
        Ok(next)
    }

    /// Rolls the building forward: row `t` of the result is the state after
    /// applying `actions[t]` under `disturbances[t]`, starting from `s0`.
    pub fn simulate(&self, s0: &[f64], actions: &Tensor, disturbances: &Tensor) -> Result<Tensor> {
        let horizon = actions.rows();
        if horizon == 0 || disturbances.rows() != horizon {
            return Err(Error::shape(
                "simulate",
                format!("horizon >= 1 with {horizon} disturbance rows"),
                disturbances.rows(),
            ));
        }
        let mut states = Tensor::zeros(horizon, self.zones);
        let mut prev = s0.to_vec();
        for t in 0..horizon {
            let row = states.row_slice_mut(t);
            self.step_into(&prev, actions.row_slice(t), disturbances.row_slice(t), row)
                .map_err(|e| match e {
                    Error::Simulation { message, .. } => Error::Simulation { step: t, message },
                    other => other,
                })?;
            prev.copy_from_slice(row);
        }
        Ok(states)
    }
}

/// Synthetic summer weather and internal gains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisturbanceProfile {
    pub seed: u64,
    pub outdoor_mean: f64,
    pub outdoor_amplitude: f64,
    pub day_to_day_std: f64,
    pub ar_coefficient: f64,
    pub ar_std: f64,
    pub outdoor_band: (f64, f64),
    /// kW at the solar peak, before the zone gain coefficient.
    pub solar_peak: f64,
    /// kW during occupied hours.
    pub occupancy_peak: f64,
    /// Weekday of the first generated day (0 = Monday).
    pub first_weekday: usize,
}

impl Default for DisturbanceProfile {
    fn default() -> Self {
        Self {
            seed: 11,
            outdoor_mean: 27.0,
            outdoor_amplitude: 4.5,
            day_to_day_std: 1.2,
            ar_coefficient: 0.95,
            ar_std: 0.25,
            outdoor_band: (20.0, 35.0),
            solar_peak: 2.0,
            occupancy_peak: 0.8,
            // 2023-06-01 was a Thursday.
            first_weekday: 3,
        }
    }
}

fn hour_of(step: usize) -> f64 {
    (step % STEPS_PER_DAY) as f64 * 24.0 / STEPS_PER_DAY as f64
}

/// Outdoor temperature, per-zone solar gain and per-zone occupancy for
/// `days · 96` steps.
pub fn generate_disturbances(profile: &DisturbanceProfile, days: usize, zones: usize) -> Tensor {
    let horizon = days * STEPS_PER_DAY;
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");

    let day_offset: Vec<f64> = (0..days)
        .map(|_| profile.day_to_day_std * std_normal.sample(&mut rng))
        .collect();
    let cloudiness: Vec<f64> = (0..days).map(|_| rng.random_range(0.6..1.0)).collect();
    let solar_shift: Vec<f64> = (0..zones).map(|_| rng.random_range(-1.5..1.5)).collect();
    let occupancy_scale: Vec<f64> = (0..zones).map(|_| rng.random_range(0.7..1.0)).collect();

    let mut out = Tensor::zeros(horizon, 1 + 2 * zones);
    let mut ar = 0.0;
    for t in 0..horizon {
        let day = t / STEPS_PER_DAY;
        let hour = hour_of(t);
        ar = profile.ar_coefficient * ar + profile.ar_std * std_normal.sample(&mut rng);
        let diurnal = (2.0 * PI * (hour - 9.0) / 24.0).sin();
        let temp = profile.outdoor_mean + day_offset[day] + profile.outdoor_amplitude * diurnal + ar;
        let row = out.row_slice_mut(t);
        row[0] = temp.clamp(profile.outdoor_band.0, profile.outdoor_band.1);

        let weekday = (profile.first_weekday + day) % 7 < 5;
        let occupied = (8.0..18.0).contains(&hour);
        let occupancy = match (weekday, occupied) {
            (true, true) => 1.0,
            (false, true) => 0.4,
            _ => 0.2,
        };
        for i in 0..zones {
            let h = hour - solar_shift[i];
            let sun = if h > 6.0 && h < 20.0 {
                (PI * (h - 6.0) / 14.0).sin().powi(2)
            } else {
                0.0
            };
            row[1 + i] = profile.solar_peak * cloudiness[day] * sun;
            row[1 + zones + i] = profile.occupancy_peak * occupancy * occupancy_scale[i];
        }
    }
    out
}

/// Historical operation under a per-zone hysteresis thermostat with
/// uniform excitation dither.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThermostatPolicy {
    pub setpoint: f64,
    /// Per-zone overrides of `setpoint`.
    pub setpoints: Option<Vec<f64>>,
    pub deadband: f64,
    /// Ā in kW; the thermostat cools at Ā/2 when on.
    pub power_limit: f64,
    /// Dither is uniform on `[0, dither_fraction · Ā]`.
    pub dither_fraction: f64,
    pub seed: u64,
}

impl Default for ThermostatPolicy {
    fn default() -> Self {
        Self {
            setpoint: 24.0,
            setpoints: None,
            deadband: 0.5,
            power_limit: 15.0,
            dither_fraction: 0.2,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `T × Z`, °C
    pub states: Tensor,
    /// `T × A`, kW electric
    pub actions: Tensor,
    /// `T × (1 + 2Z)`
    pub disturbances: Tensor,
}

/// Aligned one-step transitions `(sₜ, aₜ₊₁, δₜ₊₁) → sₜ₊₁`.
#[derive(Clone, Debug)]
pub struct Transitions {
    pub states: Tensor,
    pub actions: Tensor,
    pub disturbances: Tensor,
    pub next_states: Tensor,
}

impl Transitions {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Trajectory {
    pub fn new(states: Tensor, actions: Tensor, disturbances: Tensor) -> Result<Self> {
        let t = states.rows();
        if actions.rows() != t || disturbances.rows() != t {
            return Err(Error::shape(
                "Trajectory",
                format!("{t} rows everywhere"),
                format!("{} actions, {} disturbances", actions.rows(), disturbances.rows()),
            ));
        }
        if disturbances.cols() != 1 + 2 * states.cols() {
            return Err(Error::shape(
                "Trajectory disturbances",
                1 + 2 * states.cols(),
                disturbances.cols(),
            ));
        }
        Ok(Self {
            states,
            actions,
            disturbances,
        })
    }

    pub fn horizon(&self) -> usize {
        self.states.rows()
    }

    pub fn zones(&self) -> usize {
        self.states.cols()
    }

    pub fn conditioned(&self) -> usize {
        self.actions.cols()
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            states: self.states.slice_rows(start, len)?,
            actions: self.actions.slice_rows(start, len)?,
            disturbances: self.disturbances.slice_rows(start, len)?,
        })
    }

    /// Transition pairs: row `k` maps `states[k]` with `actions[k+1]`,
    /// `disturbances[k+1]` to `states[k+1]`.
    pub fn transitions(&self) -> Result<Transitions> {
        let t = self.horizon();
        if t < 2 {
            return Err(Error::Config("a trajectory needs at least two rows to form transitions".into()));
        }
        Ok(Transitions {
            states: self.states.slice_rows(0, t - 1)?,
            actions: self.actions.slice_rows(1, t - 1)?,
            disturbances: self.disturbances.slice_rows(1, t - 1)?,
            next_states: self.states.slice_rows(1, t - 1)?,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(csv_header(self.zones(), self.conditioned()))?;
        let mut record = Vec::with_capacity(1 + self.zones() * 3 + self.conditioned() + 1);
        for t in 0..self.horizon() {
            record.clear();
            record.push(t.to_string());
            for v in self
                .states
                .row_slice(t)
                .iter()
                .chain(self.actions.row_slice(t))
                .chain(self.disturbances.row_slice(t))
            {
                record.push(v.to_string());
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let header = r.headers()?.clone();
        let count = |prefix: &str| {
            header
                .iter()
                .filter(|h| {
                    h.strip_prefix(prefix)
                        .is_some_and(|n| n.parse::<usize>().is_ok())
                })
                .count()
        };
        let zones = count("s_");
        let conditioned = count("a_");
        let expected = csv_header(zones, conditioned);
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(Error::Config(format!(
                "unexpected dataset header; expected {}",
                expected.join(",")
            )));
        }
        let (mut s, mut a, mut d) = (Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("dataset row {}: {e}", line + 1)))?;
            s.extend_from_slice(&vals[..zones]);
            a.extend_from_slice(&vals[zones..zones + conditioned]);
            d.extend_from_slice(&vals[zones + conditioned..]);
        }
        let t = s.len() / zones.max(1);
        Self::new(
            Tensor::new(t, zones, s)?,
            Tensor::new(t, conditioned, a)?,
            Tensor::new(t, 1 + 2 * zones, d)?,
        )
    }
}

fn csv_header(zones: usize, conditioned: usize) -> Vec<String> {
    let mut h = vec!["time".to_string()];
    h.extend((1..=zones).map(|i| format!("s_{i}")));
    h.extend((1..=conditioned).map(|i| format!("a_{i}")));
    h.push("d_out".into());
    h.extend((1..=zones).map(|i| format!("d_sol_{i}")));
    h.extend((1..=zones).map(|i| format!("d_occ_{i}")));
    h
}

/// Simulates `days` of historical operation under `policy`, starting every
/// zone at its setpoint.
pub fn generate_dataset(
    building: &BuildingModel,
    profile: &DisturbanceProfile,
    policy: &ThermostatPolicy,
    days: usize,
) -> Result<Trajectory> {
    if days == 0 {
        return Err(Error::Config("at least one day is required".into()));
    }
    let z = building.zones();
    let a_dim = building.conditioned();
    let disturbances = generate_disturbances(profile, days, z);
    let setpoints: Vec<f64> = match &policy.setpoints {
        Some(sp) if sp.len() == z => sp.clone(),
        Some(sp) => {
            return Err(Error::Config(format!("{} setpoints for {z} zones", sp.len())));
        }
        None => vec![policy.setpoint; z],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let dither_max = policy.dither_fraction * policy.power_limit;

    let horizon = disturbances.rows();
    let mut states = Tensor::zeros(horizon, z);
    let mut actions = Tensor::zeros(horizon, a_dim);
    let mut prev = setpoints.clone();
    let mut cooling = vec![false; a_dim];
    for t in 0..horizon {
        let a = actions.row_slice_mut(t);
        for i in 0..a_dim {
            if prev[i] > setpoints[i] + policy.deadband {
                cooling[i] = true;
            } else if prev[i] < setpoints[i] - policy.deadband {
                cooling[i] = false;
            }
            let dither = if dither_max > 0.0 {
                rng.random_range(0.0..dither_max)
            } else {
                0.0
            };
            a[i] = if cooling[i] { policy.power_limit / 2.0 } else { 0.0 } + dither;
        }
        let row = states.row_slice_mut(t);
        building
            .step_into(&prev, actions.row_slice(t), disturbances.row_slice(t), row)
            .map_err(|e| match e {
                Error::Simulation { message, .. } => Error::Simulation { step: t, message },
                other => other,
            })?;
        prev.copy_from_slice(row);
    }
    Trajectory::new(states, actions, disturbances)
}

/// `δ′ = δ·(1 + ε)` with i.i.d. `ε ~ N(0, σ²)` per entry.
pub fn add_noise(d: &Tensor, sigma: f64, seed: u64) -> Tensor {
    assert!(sigma >= 0.0, "noise level must be nonnegative");
    if sigma == 0.0 {
        return d.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    d.map(|v| v * (1.0 + normal.sample(&mut rng)))
}
