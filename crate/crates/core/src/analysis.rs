//! Error decompositions of the latent model and of solved decisions, and
//! the per-zone abnormality classifier.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{Group, LatentModelSet};
use crate::optim::{cost, project_actions, Method, OptProblem, OptResult};
use crate::tensor::Tensor;
use crate::thermal::{BuildingModel, Trajectory};

/// Per-sample errors over the transitions of a trajectory. Row `k` of every
/// array belongs to transition `k`; reconstruction errors are taken on the
/// transition's next state, action and disturbance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentErrorReport {
    /// `s − D_s(E_s(s))`.
    pub state: Tensor,
    /// `a − D_a(E_a(a))`.
    pub action: Tensor,
    /// `δ − D_δ(E_δ(δ))`.
    pub disturbance: Tensor,
    /// `s − D_s(F̃(s̃ₖ, ã, δ̃))`.
    pub model: Tensor,
    /// `E_s(s) − F̃(s̃ₖ, ã, δ̃)`, in latent space.
    pub latent_model: Tensor,
    /// Largest `|(eᵐ − eˢ) − (D_s(s̃) − D_s(s̃ − ẽᵐ))|` over all samples.
    pub identity_residual: f64,
    pub rmse: ErrorRmse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRmse {
    pub state: f64,
    pub action: f64,
    pub disturbance: f64,
    pub model: f64,
    pub latent_model: f64,
}

fn rms(t: &Tensor) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    (t.norm_sq() / t.len() as f64).sqrt()
}

fn round_trip(set: &LatentModelSet, group: Group, x: &Tensor) -> Result<Tensor> {
    x.sub(&set.decode(group, &set.encode(group, x)?)?)
}

pub fn latent_errors(set: &LatentModelSet, data: &Trajectory) -> Result<LatentErrorReport> {
    let tr = data.transitions()?;
    let state = round_trip(set, Group::State, &tr.next_states)?;
    let action = round_trip(set, Group::Action, &tr.actions)?;
    let disturbance = round_trip(set, Group::Disturbance, &tr.disturbances)?;

    let predicted = set.latent_step(
        &set.encode(Group::State, &tr.states)?,
        &set.encode(Group::Action, &tr.actions)?,
        &set.encode(Group::Disturbance, &tr.disturbances)?,
    )?;
    let target = set.encode(Group::State, &tr.next_states)?;
    let model = tr.next_states.sub(&set.decode(Group::State, &predicted)?)?;
    let latent_model = target.sub(&predicted)?;

    // eᵐ − eˢ against D_s(s̃) − D_s(s̃ − ẽᵐ), both sides computed independently.
    let lhs = model.sub(&state)?;
    let rhs = set
        .decode(Group::State, &target)?
        .sub(&set.decode(Group::State, &target.sub(&latent_model)?)?)?;
    let identity_residual = lhs.sub(&rhs)?.max_abs();

    let rmse = ErrorRmse {
        state: rms(&state),
        action: rms(&action),
        disturbance: rms(&disturbance),
        model: rms(&model),
        latent_model: rms(&latent_model),
    };
    let report = LatentErrorReport {
        state,
        action,
        disturbance,
        model,
        latent_model,
        identity_residual,
        rmse,
    };
    if !report.identity_residual.is_finite() {
        return Err(Error::NonFiniteCoordinate {
            coordinate: 0,
            value: report.identity_residual,
        });
    }
    Ok(report)
}

/// Which side of the action box an entry fell on before projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clamp {
    Interior,
    Lower,
    Upper,
}

pub fn clamp_branches(a: &Tensor, problem: &OptProblem) -> Vec<Clamp> {
    a.as_slice()
        .iter()
        .zip(problem.action_lower.as_slice())
        .zip(problem.action_upper.as_slice())
        .map(|((&x, &lo), &hi)| {
            if x < lo {
                Clamp::Lower
            } else if x > hi {
                Clamp::Upper
            } else {
                Clamp::Interior
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionErrorReport {
    pub method: Method,
    /// `a″ − a′`.
    pub action: Tensor,
    /// `s″ − s′`.
    pub state: Tensor,
    /// `C(a″, s″) − C(a′, s′)`.
    pub objective: f64,
    /// Largest gap between the stored projection and a fresh clamp of `a′`.
    pub projection_residual: f64,
    /// Largest gap between the stored `ẽ` inputs and a fresh cost evaluation.
    pub cost_residual: f64,
    /// For simulator-driven latent results, the largest gap between stored
    /// `ẽˢ` and `F(a″, δ) − F(a′, δ′)` recomputed from the simulator.
    pub simulation_residual: Option<f64>,
}

/// Decomposes the gap between the solved and the actual outcome of `result`.
/// `building` enables the simulator identity check for OptSim results.
pub fn decision_errors(
    result: &OptResult,
    problem: &OptProblem,
    building: Option<&BuildingModel>,
) -> Result<DecisionErrorReport> {
    let solved = &result.decoded_actions;
    let actual = &result.projected_actions;
    let action = actual.sub(solved)?;
    let state = result.actual_states.sub(&result.predicted_states)?;

    let dec = cost(solved, &result.predicted_states, problem)?;
    let act = cost(actual, &result.actual_states, problem)?;
    let objective = act.total - dec.total;
    let cost_residual = (dec.total - result.costs.sum_dec)
        .abs()
        .max((act.total - result.costs.sum_act).abs());

    let projection_residual = project_actions(solved, problem).sub(actual)?.max_abs();

    let simulation_residual = match (result.method, building) {
        (Method::OptSim, Some(b)) => {
            let s_act = b.simulate(&problem.initial_state, actual, problem.actual_disturbances())?;
            let s_dec = b.simulate(&problem.initial_state, solved, &problem.forecast)?;
            Some(s_act.sub(&s_dec)?.sub(&state)?.max_abs())
        }
        _ => None,
    };

    Ok(DecisionErrorReport {
        method: result.method,
        action,
        state,
        objective,
        projection_residual,
        cost_residual,
        simulation_residual,
    })
}

/// Default relative-gap threshold of the zone classifier.
pub const ABNORMAL_THRESHOLD: f64 = 12.0;
/// Denominator guard of the zone classifier, in $.
pub const ABNORMAL_EPSILON: f64 = 1e-6;

/// `uᵢ = Σₜ Pₜ·([sₜᵢ − s̄ₜᵢ]₊² + [s̲ₜᵢ − sₜᵢ]₊²)` for every zone.
pub fn zone_penalties(states: &Tensor, problem: &OptProblem) -> Result<Vec<f64>> {
    if states.shape() != problem.comfort_upper.shape() {
        return Err(Error::shape(
            "zone_penalties",
            format!("{:?}", problem.comfort_upper.shape()),
            format!("{:?}", states.shape()),
        ));
    }
    let mut u = vec![0.0; states.cols()];
    for t in 0..states.rows() {
        let w = problem.temperature_penalty[t];
        let rows = states
            .row_slice(t)
            .iter()
            .zip(problem.comfort_lower.row_slice(t))
            .zip(problem.comfort_upper.row_slice(t));
        for (ui, ((&x, &lo), &hi)) in u.iter_mut().zip(rows) {
            let over = (x - hi).max(0.0);
            let under = (lo - x).max(0.0);
            *ui += w * (over * over + under * under);
        }
    }
    Ok(u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZoneFlag {
    pub zone: usize,
    pub method: Method,
    pub penalty: f64,
    /// 1 when abnormal.
    pub flag: u8,
}

/// `|(u − u₀)/(u₀ + ς)| > U`.
pub fn is_abnormal(u: f64, reference: f64, threshold: f64, epsilon: f64) -> bool {
    ((u - reference) / (reference + epsilon)).abs() > threshold
}

/// Flags every zone of every result against the ground-truth penalties,
/// using each result's actual states.
pub fn classify_zones(
    results: &[&OptResult],
    reference: &OptResult,
    problem: &OptProblem,
    threshold: f64,
    epsilon: f64,
) -> Result<Vec<ZoneFlag>> {
    let base = zone_penalties(&reference.actual_states, problem)?;
    let mut flags = Vec::new();
    for r in results {
        for (zone, (u, u0)) in zone_penalties(&r.actual_states, problem)?.into_iter().zip(&base).enumerate() {
            flags.push(ZoneFlag {
                zone,
                method: r.method,
                penalty: u,
                flag: is_abnormal(u, *u0, threshold, epsilon) as u8,
            });
        }
    }
    Ok(flags)
}

pub fn write_zone_flags_csv(flags: &[ZoneFlag], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for f in flags {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{Autoencoder, Normalizer};
    use crate::nn::{Layer, Mlp};
    use crate::optim::{CostBreakdown, StopReason, Timing};

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

    /// One zone, lossless autoencoders, dynamics `s' = 0.9s + 0.1a + 0.05δ₀`.
    fn toy_set() -> LatentModelSet {
        let dyn_w = Tensor::new(5, 1, vec![0.9, 0.1, 0.05, 0.0, 0.0]).unwrap();
        LatentModelSet {
            state: identity_ae(1),
            action: identity_ae(1),
            disturbance: identity_ae(3),
            dynamics: linear(dyn_w),
            normalizers: Some([Normalizer::identity(1), Normalizer::identity(1), Normalizer::identity(3)]),
        }
    }

    fn toy_trajectory(exact: bool) -> Trajectory {
        let n = 20;
        let a = Tensor::from_fn(n, 1, |t, _| (t as f64 * 0.7).sin() + 1.0);
        let d = Tensor::from_fn(n, 3, |t, c| if c == 0 { 25.0 + (t as f64).cos() } else { 0.1 * c as f64 });
        let mut s = Tensor::zeros(n, 1);
        s.set(0, 0, 22.0);
        for t in 1..n {
            let mut next = 0.9 * s.get(t - 1, 0) + 0.1 * a.get(t, 0) + 0.05 * d.get(t, 0);
            if !exact && t % 3 == 0 {
                next += 0.2;
            }
            s.set(t, 0, next);
        }
        Trajectory::new(s, a, d).unwrap()
    }

    #[test]
    fn lossless_autoencoders_have_zero_reconstruction_error() {
        let r = latent_errors(&toy_set(), &toy_trajectory(false)).unwrap();
        assert_eq!(r.state.max_abs(), 0.0);
        assert_eq!(r.action.max_abs(), 0.0);
        assert_eq!(r.disturbance.max_abs(), 0.0);
        assert!(r.rmse.model > 0.0);
        assert!(r.identity_residual < 1e-9);
    }

    #[test]
    fn model_error_equals_state_error_where_latent_error_vanishes() {
        let r = latent_errors(&toy_set(), &toy_trajectory(true)).unwrap();
        for k in 0..r.model.rows() {
            if r.latent_model.get(k, 0).abs() < 1e-12 {
                assert!((r.model.get(k, 0) - r.state.get(k, 0)).abs() < 1e-9);
            }
        }
        assert!(r.rmse.latent_model < 1e-9);
    }

    fn box_problem(t: usize) -> OptProblem {
        OptProblem {
            dt_hours: 0.25,
            prices: vec![0.1; t],
            temperature_penalty: vec![0.0005; t],
            action_penalty: 10.0,
            comfort_lower: Tensor::filled(t, 1, 21.0),
            comfort_upper: Tensor::filled(t, 1, 24.0),
            action_lower: Tensor::zeros(t, 1),
            action_upper: Tensor::filled(t, 1, 15.0),
            initial_state: vec![22.0],
            forecast: Tensor::zeros(t, 3),
            actual: None,
        }
    }

    fn result_for(decoded: Tensor, predicted: Tensor, actual_states: Tensor, problem: &OptProblem) -> OptResult {
        let projected = project_actions(&decoded, problem);
        let dec = cost(&decoded, &predicted, problem).unwrap();
        let act = cost(&projected, &actual_states, problem).unwrap();
        OptResult {
            method: Method::OptIden,
            latent_actions: None,
            decoded_actions: decoded,
            projected_actions: projected,
            predicted_states: predicted,
            actual_states,
            costs: CostBreakdown::new(dec, act),
            objective: 0.0,
            iterations: 0,
            best_iteration: 0,
            stop: StopReason::MaxIterations,
            simulator_calls: 0,
            log: Vec::new(),
            timing: Timing::default(),
        }
    }

    #[test]
    fn feasible_actions_have_no_action_error() {
        let p = box_problem(4);
        let a = Tensor::new(4, 1, vec![0.0, 3.0, 15.0, 7.5]).unwrap();
        let s = Tensor::filled(4, 1, 22.0);
        let r = decision_errors(&result_for(a, s.clone(), s, &p), &p, None).unwrap();
        assert_eq!(r.action.max_abs(), 0.0);
        assert_eq!(r.objective, 0.0);
        assert!(r.cost_residual < 1e-12);
    }

    #[test]
    fn upper_violation_reports_negative_excess() {
        let p = box_problem(3);
        let a = Tensor::new(3, 1, vec![16.0, 2.0, -0.5]).unwrap();
        let s = Tensor::filled(3, 1, 22.0);
        let r = decision_errors(&result_for(a.clone(), s.clone(), s, &p), &p, None).unwrap();
        assert_eq!(r.action.as_slice(), &[-1.0, 0.0, 0.5]);
        assert_eq!(clamp_branches(&a, &p), vec![Clamp::Upper, Clamp::Interior, Clamp::Lower]);
        assert_eq!(r.projection_residual, 0.0);
    }

    #[test]
    fn identical_penalties_are_normal() {
        let p = box_problem(4);
        let s = Tensor::new(4, 1, vec![25.0, 22.0, 20.0, 23.0]).unwrap();
        let a = Tensor::zeros(4, 1);
        let gt = result_for(a.clone(), s.clone(), s.clone(), &p);
        let flags = classify_zones(&[&gt], &gt, &p, ABNORMAL_THRESHOLD, ABNORMAL_EPSILON).unwrap();
        assert_eq!(flags.len(), 1);
        assert_eq!(flags[0].flag, 0);
        assert!((flags[0].penalty - 0.0005 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn classifier_threshold_cases() {
        let eps = ABNORMAL_EPSILON;
        let u0 = 0.3;
        assert!(is_abnormal(13.0 * (u0 + eps) + u0, u0, 12.0, eps));
        assert!(!is_abnormal(11.0 * (u0 + eps) + u0, u0, 12.0, eps));
        assert!(!is_abnormal(1e-7, 0.0, 12.0, eps));
    }

    proptest::proptest! {
        #[test]
        fn clamp_branches_agree_with_projection(values in proptest::collection::vec(-10.0f64..25.0, 1..50)) {
            let p = box_problem(values.len());
            let a = Tensor::new(values.len(), 1, values).unwrap();
            let projected = project_actions(&a, &p);
            for ((branch, &x), &y) in clamp_branches(&a, &p).iter().zip(a.as_slice()).zip(projected.as_slice()) {
                let expected = match branch {
                    Clamp::Interior => x,
                    Clamp::Lower => 0.0,
                    Clamp::Upper => 15.0,
                };
                proptest::prop_assert_eq!(y, expected);
            }
        }
    }
}
