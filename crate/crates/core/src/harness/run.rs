use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{day_dir, solve, write_json, write_result, ExperimentConfig, Models, Scenario};
use crate::analysis::{classify_zones, decision_errors, write_zone_flags_csv, ZoneFlag};
use crate::error::Result;
use crate::latent::{LatentDims, MeanStd};
use crate::optim::{CostBreakdown, Method, OptResult, StopReason};

/// Runs `f` over `jobs` on up to `threads` workers; output order follows
/// `jobs`.
fn run_jobs<J: Sync, R: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(job) = jobs.get(i) else { break };
        let r = f(job);
        *slots[i].lock().expect("slot lock") = Some(r);
    };
    if threads <= 1 || jobs.len() <= 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads.min(jobs.len()) {
                s.spawn(worker);
            }
        });
    }
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every job ran"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub day: usize,
    pub date: NaiveDate,
    pub method: Method,
    #[serde(flatten)]
    pub status: RunStatus,
    pub costs: Option<CostBreakdown>,
    pub objective: Option<f64>,
    pub iterations: Option<usize>,
    pub stop: Option<StopReason>,
    pub simulator_calls: Option<u64>,
    /// Zones flagged against the ground truth of the same day.
    pub abnormal_zones: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: Method,
    pub completed: usize,
    pub failed: usize,
    pub sum_act: MeanStd,
    pub sum_dec: MeanStd,
    pub pow_act: MeanStd,
    pub tem_act: MeanStd,
    /// Mean `|Sum_dec − Sum_act|`.
    pub dec_act_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoneCount {
    pub method: Method,
    pub abnormal: usize,
    pub checked: usize,
}

/// Deterministic part of a suite run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub days: usize,
    pub methods: Vec<Method>,
    /// Cost of the recorded thermostat operation, for reference.
    pub thermostat: MeanStd,
    pub runs: Vec<RunSummary>,
    pub aggregate: Vec<MethodAggregate>,
    pub zone_counts: Vec<ZoneCount>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: Method,
    pub runs: usize,
    pub total_seconds: f64,
    pub iterations: usize,
    pub per_iteration_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub report: SuiteReport,
    pub timing: Vec<TimingRow>,
    /// Completed results by (day, method).
    pub results: BTreeMap<(usize, Method), OptResult>,
}

impl SuiteOutcome {
    pub fn all_completed(&self) -> bool {
        self.report.runs.iter().all(|r| r.status == RunStatus::Completed)
    }
}

fn summary_of(day: usize, date: NaiveDate, method: Method, r: &Result<OptResult>) -> RunSummary {
    match r {
        Ok(r) => RunSummary {
            day,
            date,
            method,
            status: RunStatus::Completed,
            costs: Some(r.costs),
            objective: Some(r.objective),
            iterations: Some(r.iterations),
            stop: Some(r.stop),
            simulator_calls: Some(r.simulator_calls),
            abnormal_zones: None,
        },
        Err(e) => RunSummary {
            day,
            date,
            method,
            status: RunStatus::Failed { error: e.to_string() },
            costs: None,
            objective: None,
            iterations: None,
            stop: None,
            simulator_calls: None,
            abnormal_zones: None,
        },
    }
}

fn aggregate(methods: &[Method], runs: &[RunSummary]) -> Vec<MethodAggregate> {
    methods
        .iter()
        .map(|&m| {
            let costs: Vec<CostBreakdown> = runs.iter().filter(|r| r.method == m).filter_map(|r| r.costs).collect();
            let of = |f: fn(&CostBreakdown) -> f64| MeanStd::of(&costs.iter().map(f).collect::<Vec<_>>());
            let gaps: Vec<f64> = costs.iter().map(|c| (c.sum_dec - c.sum_act).abs()).collect();
            MethodAggregate {
                method: m,
                completed: costs.len(),
                failed: runs.iter().filter(|r| r.method == m).count() - costs.len(),
                sum_act: of(|c| c.sum_act),
                sum_dec: of(|c| c.sum_dec),
                pow_act: of(|c| c.pow_act),
                tem_act: of(|c| c.tem_act),
                dec_act_gap: MeanStd::of(&gaps).mean,
            }
        })
        .collect()
}

fn write_rows<T: Serialize>(rows: impl IntoIterator<Item = T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Every configured method on every test day. Results go under `out` as
/// `day_XX/<method>.json` with logs, error decompositions and zone flags,
/// plus `summary.json`, `aggregate.csv`, `runs.csv` and the timing table.
/// Solver failures are recorded and do not stop the suite.
pub fn run_suite(scenario: &Scenario, models: &Models, out: &Path) -> Result<SuiteOutcome> {
    let cfg = &scenario.config;
    let methods = cfg.methods.clone();
    let days = scenario.test_days();
    std::fs::create_dir_all(out)?;

    let problems = (0..days).map(|d| scenario.problem(d, None)).collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Method)> = (0..days).flat_map(|d| methods.iter().map(move |&m| (d, m))).collect();
    let solved = run_jobs(&jobs, cfg.threads, |&(d, m)| {
        solve(m, &problems[d], models, &scenario.building, cfg.solvers.get(m))
    });

    let mut runs = Vec::with_capacity(jobs.len());
    let mut results = BTreeMap::new();
    for (&(d, m), r) in jobs.iter().zip(solved) {
        runs.push(summary_of(d, scenario.test_date(d), m, &r));
        if let Ok(r) = r {
            let dir = day_dir(out, d);
            write_result(&r, &dir)?;
            let errors = decision_errors(&r, &problems[d], Some(&scenario.building))?;
            write_json(&errors, &dir.join(format!("{m}_errors.json")))?;
            results.insert((d, m), r);
        }
    }

    let mut zone_counts: BTreeMap<Method, ZoneCount> = BTreeMap::new();
    for d in 0..days {
        let Some(gt) = results.get(&(d, Method::GroundTruth)) else { continue };
        let others: Vec<&OptResult> = methods.iter().filter_map(|&m| results.get(&(d, m))).collect();
        let flags: Vec<ZoneFlag> = classify_zones(
            &others,
            gt,
            &problems[d],
            cfg.classifier.threshold,
            cfg.classifier.epsilon,
        )?;
        write_zone_flags_csv(&flags, &day_dir(out, d).join("zone_flags.csv"))?;
        for f in &flags {
            let c = zone_counts.entry(f.method).or_insert(ZoneCount {
                method: f.method,
                abnormal: 0,
                checked: 0,
            });
            c.abnormal += f.flag as usize;
            c.checked += 1;
        }
        for run in runs.iter_mut().filter(|r| r.day == d) {
            let n = flags.iter().filter(|f| f.method == run.method && f.flag == 1).count();
            if run.status == RunStatus::Completed {
                run.abnormal_zones = Some(n);
            }
        }
    }

    let thermostat = (0..days).map(|d| scenario.thermostat_cost(d)).collect::<Result<Vec<_>>>()?;
    let report = SuiteReport {
        days,
        methods: methods.clone(),
        thermostat: MeanStd::of(&thermostat),
        aggregate: aggregate(&methods, &runs),
        zone_counts: zone_counts.into_values().collect(),
        runs,
    };

    let timing: Vec<TimingRow> = methods
        .iter()
        .map(|&m| {
            let rs: Vec<&OptResult> = results.iter().filter(|((_, k), _)| *k == m).map(|(_, r)| r).collect();
            let total: Duration = rs.iter().map(|r| r.timing.total).sum();
            let iterations: usize = rs.iter().map(|r| r.iterations).sum();
            TimingRow {
                method: m,
                runs: rs.len(),
                total_seconds: secs(total),
                iterations,
                per_iteration_seconds: if iterations > 0 { secs(total) / iterations as f64 } else { 0.0 },
            }
        })
        .collect();

    write_json(&report, &out.join("summary.json"))?;
    write_table(
        "method,completed,failed,sum_act_mean,sum_act_std,sum_dec_mean,pow_act_mean,tem_act_mean,dec_act_gap",
        report.aggregate.iter().map(|a| {
            (
                a.method,
                a.completed,
                a.failed,
                a.sum_act.mean,
                a.sum_act.std,
                a.sum_dec.mean,
                a.pow_act.mean,
                a.tem_act.mean,
                a.dec_act_gap,
            )
        }),
        &out.join("aggregate.csv"),
    )?;
    write_table(
        "day,date,method,completed,sum_dec,sum_act,pow_act,tem_act,iterations,abnormal_zones",
        report.runs.iter().map(|r| {
            let c = r.costs;
            (
                r.day,
                r.date.to_string(),
                r.method,
                matches!(r.status, RunStatus::Completed),
                c.map(|c| c.sum_dec),
                c.map(|c| c.sum_act),
                c.map(|c| c.pow_act),
                c.map(|c| c.tem_act),
                r.iterations,
                r.abnormal_zones,
            )
        }),
        &out.join("runs.csv"),
    )?;
    write_json(&timing, &out.join("timing.json"))?;
    write_rows(&timing, &out.join("timing.csv"))?;

    Ok(SuiteOutcome {
        report,
        timing,
        results,
    })
}

/// Tuple rows under an explicit header.
fn write_table<T: Serialize>(header: &str, rows: impl IntoIterator<Item = T>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub sigma: f64,
    pub day: usize,
    pub method: Method,
    pub sum_act: Option<f64>,
    pub sum_dec: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRobustness {
    pub method: Method,
    /// Mean Sum_act over days at each positive noise level.
    pub per_sigma: Vec<Option<f64>>,
    /// Spread of `per_sigma` across the positive levels; absent if any run
    /// failed.
    pub std_over_sigma: Option<f64>,
    pub mean_over_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    /// The zero-noise anchor followed by the configured levels.
    pub sigmas: Vec<f64>,
    pub methods: Vec<Method>,
    pub points: Vec<NoisePoint>,
    pub robustness: Vec<MethodRobustness>,
}

impl NoiseReport {
    pub fn all_completed(&self) -> bool {
        self.points.iter().all(|p| p.error.is_none())
    }

    pub fn robustness_of(&self, m: Method) -> Option<&MethodRobustness> {
        self.robustness.iter().find(|r| r.method == m)
    }
}

/// Shared by every method at a given level and day.
fn noise_seed(base: u64, day: usize, sigma: f64) -> u64 {
    base ^ (day as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ sigma.to_bits()
}

/// Every method on every test day at each noise level, with the solver
/// seeing `δ′` and the building running on `δ`. Writes `summary.json` and
/// `noise.csv` under `out`.
pub fn run_noise_sweep(scenario: &Scenario, models: &Models, sigmas: &[f64], out: &Path) -> Result<NoiseReport> {
    let cfg = &scenario.config;
    let methods = cfg.methods.clone();
    let mut levels = vec![0.0];
    levels.extend(sigmas.iter().copied().filter(|&s| s != 0.0));
    let days = scenario.test_days();

    let mut problems = Vec::new();
    for &s in &levels {
        for d in 0..days {
            problems.push(scenario.problem(d, Some((s, noise_seed(cfg.noise.seed, d, s))))?);
        }
    }
    let mut jobs = Vec::new();
    for l in 0..levels.len() {
        for d in 0..days {
            jobs.extend(methods.iter().map(|&m| (l, d, m)));
        }
    }
    let solved = run_jobs(&jobs, cfg.threads, |&(l, d, m)| {
        solve(m, &problems[l * days + d], models, &scenario.building, cfg.solvers.get(m))
    });
    let points: Vec<NoisePoint> = jobs
        .iter()
        .zip(solved)
        .map(|(&(l, d, m), r)| match r {
            Ok(r) => NoisePoint {
                sigma: levels[l],
                day: d,
                method: m,
                sum_act: Some(r.costs.sum_act),
                sum_dec: Some(r.costs.sum_dec),
                error: None,
            },
            Err(e) => NoisePoint {
                sigma: levels[l],
                day: d,
                method: m,
                sum_act: None,
                sum_dec: None,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let robustness = methods
        .iter()
        .map(|&m| {
            let per_sigma: Vec<Option<f64>> = levels[1..]
                .iter()
                .map(|&s| {
                    let v: Option<Vec<f64>> = points
                        .iter()
                        .filter(|p| p.method == m && p.sigma == s)
                        .map(|p| p.sum_act)
                        .collect();
                    v.map(|v| MeanStd::of(&v).mean)
                })
                .collect();
            let complete: Option<Vec<f64>> = per_sigma.iter().copied().collect();
            let stats = complete.filter(|v| !v.is_empty()).map(|v| MeanStd::of(&v));
            MethodRobustness {
                method: m,
                per_sigma,
                std_over_sigma: stats.as_ref().map(|s| s.std),
                mean_over_sigma: stats.map(|s| s.mean),
            }
        })
        .collect();

    let report = NoiseReport {
        sigmas: levels,
        methods,
        points,
        robustness,
    };
    std::fs::create_dir_all(out)?;
    write_json(&report, &out.join("summary.json"))?;
    write_rows(&report.points, &out.join("noise.csv"))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub zones: usize,
    pub actions: usize,
    pub disturbances: usize,
    pub latent: LatentDims,
    pub original_total: usize,
    pub latent_total: usize,
    pub reduction_ratio: f64,
    pub latent_rmse: f64,
    pub linear_rmse: f64,
    /// Decision variables of the original-space problem.
    pub horizon_times_actions: usize,
    pub gt_per_iteration_seconds: Option<f64>,
    pub optiden_per_iteration_seconds: Option<f64>,
}

/// A configuration recorded for comparison, not reproduced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub zones: usize,
    pub original_total: usize,
    pub latent_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub reference: ReferencePoint,
}

/// Latent sizes for `zones`, grown from `base` at `base_zones` by
/// `(zones / base_zones)^exponent`, rounded up.
pub fn scaled_dims(base: LatentDims, base_zones: usize, zones: usize, exponent: f64) -> LatentDims {
    let f = (zones as f64 / base_zones as f64).powf(exponent);
    let grow = |n: usize| ((n as f64 * f).ceil() as usize).max(1);
    LatentDims {
        state: grow(base.state),
        action: grow(base.action),
        disturbance: grow(base.disturbance),
    }
}

/// Fits both models and times both gradient solvers for each zone count.
/// Writes `summary.json` and `scaling.csv` under `out`.
pub fn run_scaling(config: &ExperimentConfig, zones: &[usize], out: &Path) -> Result<ScalingReport> {
    let sc = &config.scaling;
    let mut rows = Vec::new();
    for &z in zones {
        let mut cfg = config.clone();
        cfg.building.zones = z;
        cfg.building.conditioned = None;
        cfg.days.train = sc.train_days;
        cfg.days.test = sc.test_days;
        cfg.train.epochs = sc.epochs;
        cfg.train.dims = scaled_dims(config.train.dims, config.building.zones, z, sc.dims_exponent);
        let scenario = Scenario::prepare(&cfg)?;
        let (models, _) = Models::fit(&scenario)?;
        let acc = models.accuracy(&scenario)?;
        let (zs, a, d) = models.latent.original_dims();
        let latent = models.latent.dims();

        let problem = scenario.problem(0, None)?;
        let timed = |m: Method| -> Option<f64> {
            let solver = crate::optim::SolverConfig {
                max_iterations: sc.timing_iterations,
                ..cfg.solvers.get(m).clone()
            };
            super::solve(m, &problem, &models, &scenario.building, &solver)
                .ok()
                .map(|r| secs(r.timing.per_iteration))
        };
        rows.push(ScalingRow {
            zones: zs,
            actions: a,
            disturbances: d,
            latent,
            original_total: zs + a + d,
            latent_total: latent.total(),
            reduction_ratio: models.latent.reduction_ratio(),
            latent_rmse: acc.latent.rmse_summary.mean,
            linear_rmse: acc.linear.rmse_summary.mean,
            horizon_times_actions: problem.horizon() * a,
            gt_per_iteration_seconds: timed(Method::GroundTruth),
            optiden_per_iteration_seconds: timed(Method::OptIden),
        });
    }
    let report = ScalingReport {
        rows,
        reference: ReferencePoint {
            zones: 1080,
            original_total: 4201,
            latent_total: 15,
        },
    };
    std::fs::create_dir_all(out)?;
    write_json(&report, &out.join("summary.json"))?;
    write_table(
        "zones,actions,disturbances,latent_state,latent_action,latent_disturbance,reduction_ratio,latent_rmse,linear_rmse,horizon_times_actions,gt_per_iteration_s,optiden_per_iteration_s",
        report.rows.iter().map(|r| {
            (
                r.zones,
                r.actions,
                r.disturbances,
                r.latent.state,
                r.latent.action,
                r.latent.disturbance,
                r.reduction_ratio,
                r.latent_rmse,
                r.linear_rmse,
                r.horizon_times_actions,
                r.gt_per_iteration_seconds,
                r.optiden_per_iteration_seconds,
            )
        }),
        &out.join("scaling.csv"),
    )?;
    Ok(report)
}
