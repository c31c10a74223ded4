//! The adaptive step loop shared by every solver.
//!
//! Iteration `k` evaluates `C̄(x_k)` and a descent direction `g_k`, then
//! moves to `x_k − η·g_k + α·(x_k − x_{k−1})`. The step halves whenever the
//! last `K1` objective differences are all increases, and the loop stops once
//! the last `K2` differences are all at most `stop_delta` in magnitude.
//! Log entry `k` records the step used to leave `x_k`; on an early stop it is
//! the final entry and no step is taken.

use serde::{Deserialize, Serialize};

use super::SolverConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub step_size: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    EarlyStop,
}

#[derive(Clone, Debug)]
pub struct DescentOutcome {
    /// Lowest-objective iterate seen.
    pub best: Vec<f64>,
    pub best_objective: f64,
    pub best_iteration: usize,
    pub iterations: usize,
    pub stop: StopReason,
    pub log: Vec<IterRecord>,
}

/// Runs the loop from `x0`. `oracle(k, x)` returns `C̄(x)` and the direction.
pub fn adaptive_descent(
    x0: Vec<f64>,
    cfg: &SolverConfig,
    momentum: f64,
    method: &str,
    mut oracle: impl FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<DescentOutcome> {
    cfg.validate()?;
    let n = x0.len();
    let mut x = x0.clone();
    let mut prev = x0;
    let mut eta = cfg.step_size;
    let mut log = Vec::with_capacity(cfg.max_iterations);
    let mut best = (f64::INFINITY, x.clone(), 0);
    let mut last = f64::NAN;
    let mut rising = 0;
    let mut flat = 0;
    let mut stop = StopReason::MaxIterations;

    for k in 0..cfg.max_iterations {
        let non_finite = || Error::SolverNonFinite {
            method: method.to_owned(),
            iteration: k,
        };
        let (c, dir) = match oracle(k, &x) {
            Ok(v) => v,
            // A diverged iterate drives the simulator to non-finite states.
            Err(Error::Simulation { .. }) => return Err(non_finite()),
            Err(e) => return Err(e),
        };
        if !c.is_finite() || !dir.iter().all(|v| v.is_finite()) {
            return Err(non_finite());
        }
        debug_assert_eq!(dir.len(), n);
        if c < best.0 {
            best = (c, x.clone(), k);
        }
        if k > 0 {
            let d = c - last;
            rising = if d > 0.0 { rising + 1 } else { 0 };
            flat = if d.abs() <= cfg.stop_delta { flat + 1 } else { 0 };
        }
        last = c;
        if flat >= cfg.stop_streak {
            log.push(IterRecord {
                iter: k,
                objective: c,
                step_size: eta,
            });
            stop = StopReason::EarlyStop;
            break;
        }
        if rising >= cfg.halving_streak {
            eta *= 0.5;
        }
        log.push(IterRecord {
            iter: k,
            objective: c,
            step_size: eta,
        });
        for i in 0..n {
            let next = x[i] - eta * dir[i] + momentum * (x[i] - prev[i]);
            prev[i] = x[i];
            x[i] = next;
        }
    }
    Ok(DescentOutcome {
        best: best.1,
        best_objective: best.0,
        best_iteration: best.2,
        iterations: log.len(),
        stop,
        log,
    })
}

/// A departure of an iteration log from the adaptive step rules.
#[derive(Clone, Debug, PartialEq)]
pub enum LogViolation {
    InitialStep { found: f64 },
    NonHalvingChange { iter: usize, from: f64, to: f64 },
    UnwarrantedHalving { iter: usize },
    MissedHalving { iter: usize },
    UnwarrantedStop { iter: usize },
    MissedStop { iter: usize },
}

/// Checks every step change and the stopping point of `log` against the
/// rules of [`adaptive_descent`].
pub fn check_log(log: &[IterRecord], cfg: &SolverConfig, stop: StopReason) -> std::result::Result<(), LogViolation> {
    let Some(first) = log.first() else {
        return Ok(());
    };
    let last_k = log.len() - 1;
    let rising_at = |k: usize| {
        k >= cfg.halving_streak
            && (k + 1 - cfg.halving_streak..=k).all(|j| log[j].objective > log[j - 1].objective)
    };
    let flat_at = |k: usize| {
        k >= cfg.stop_streak
            && (k + 1 - cfg.stop_streak..=k)
                .all(|j| (log[j].objective - log[j - 1].objective).abs() <= cfg.stop_delta)
    };
    let expected_first = if rising_at(0) { cfg.step_size * 0.5 } else { cfg.step_size };
    if first.step_size != expected_first {
        return Err(LogViolation::InitialStep {
            found: first.step_size,
        });
    }
    for k in 1..log.len() {
        let stopping = stop == StopReason::EarlyStop && k == last_k;
        let (from, to) = (log[k - 1].step_size, log[k].step_size);
        if to != from {
            if to != from * 0.5 {
                return Err(LogViolation::NonHalvingChange { iter: k, from, to });
            }
            if !rising_at(k) {
                return Err(LogViolation::UnwarrantedHalving { iter: k });
            }
        } else if rising_at(k) && !stopping {
            return Err(LogViolation::MissedHalving { iter: k });
        }
        if flat_at(k) && !stopping {
            return Err(LogViolation::MissedStop { iter: k });
        }
    }
    if stop == StopReason::EarlyStop && !flat_at(last_k) {
        return Err(LogViolation::UnwarrantedStop { iter: last_k });
    }
    Ok(())
}
