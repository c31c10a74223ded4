//! Affine one-step model `sₜ₊₁ = A·sₜ + B·aₜ₊₁ + E·δₜ₊₁ + c` identified by
//! ridge-damped least squares, with an adjoint gradient of the penalty
//! objective through its rollout.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{cost, penalty_objective, OptProblem};
use crate::error::{Error, Result};
use crate::latent::OneStepPredictor;
use crate::tensor::Tensor;
use crate::thermal::Trajectory;

const RIDGE: f64 = 1e-8;

/// Row convention: `s_next = [s, a, δ]·theta + intercept`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    zones: usize,
    actions: usize,
    disturbances: usize,
    /// `(Z + A + D) × Z`.
    theta: Tensor,
    /// `1 × Z`.
    intercept: Tensor,
    pub fit: FitStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub samples: usize,
    /// In-sample one-step residual RMSE per zone.
    pub residual_rmse: Vec<f64>,
    pub residual_rmse_overall: f64,
}

/// Least-squares fit on the transitions of `data`. Columns are standardized
/// before the damped normal equations are solved, then mapped back.
pub fn oriiden_identify(data: &Trajectory) -> Result<LinearModel> {
    let tr = data.transitions()?;
    let (z, a, d) = (tr.states.cols(), tr.actions.cols(), tr.disturbances.cols());
    let p = z + a + d;
    let n = tr.len();
    if n < p + 1 {
        return Err(Error::RankDeficient(format!(
            "{n} samples for {} regressors",
            p + 1
        )));
    }
    let x = Tensor::concat_cols(&[&tr.states, &tr.actions, &tr.disturbances])?;
    let y = &tr.next_states;

    let mean_of = |m: &Tensor| -> Vec<f64> {
        (0..m.cols()).map(|c| m.column(c).iter().sum::<f64>() / n as f64).collect()
    };
    let mu_x = mean_of(&x);
    let mu_y = mean_of(y);
    let sd_x: Vec<f64> = (0..p)
        .map(|c| {
            let var = x.column(c).iter().map(|v| (v - mu_x[c]).powi(2)).sum::<f64>() / n as f64;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();

    let xs = DMatrix::from_fn(n, p, |r, c| (x.get(r, c) - mu_x[c]) / sd_x[c]);
    let yc = DMatrix::from_fn(n, z, |r, c| y.get(r, c) - mu_y[c]);
    let gram = xs.transpose() * &xs + DMatrix::identity(p, p) * RIDGE;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("normal equations are not positive definite".into()))?;
    let coef = chol.solve(&(xs.transpose() * yc));
    if !coef.iter().all(|v| v.is_finite()) {
        return Err(Error::RankDeficient("non-finite coefficients".into()));
    }

    let theta = Tensor::from_fn(p, z, |r, c| coef[(r, c)] / sd_x[r]);
    let intercept = Tensor::row(
        (0..z)
            .map(|c| mu_y[c] - (0..p).map(|r| mu_x[r] * theta.get(r, c)).sum::<f64>())
            .collect(),
    );
    let mut model = LinearModel {
        zones: z,
        actions: a,
        disturbances: d,
        theta,
        intercept,
        fit: FitStats {
            samples: n,
            residual_rmse: Vec::new(),
            residual_rmse_overall: 0.0,
        },
    };
    let resid = model.predict(&tr.states, &tr.actions, &tr.disturbances)?.sub(y)?;
    model.fit.residual_rmse = (0..z)
        .map(|c| (resid.column(c).iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt())
        .collect();
    model.fit.residual_rmse_overall = (resid.norm_sq() / resid.len() as f64).sqrt();
    Ok(model)
}

impl LinearModel {
    pub fn zones(&self) -> usize {
        self.zones
    }

    pub fn action_dim(&self) -> usize {
        self.actions
    }

    /// `Z × Z` block acting on the current state (row convention).
    pub fn state_block(&self) -> Tensor {
        self.theta.slice_rows(0, self.zones).expect("in range")
    }

    pub fn action_block(&self) -> Tensor {
        self.theta.slice_rows(self.zones, self.actions).expect("in range")
    }

    pub fn disturbance_block(&self) -> Tensor {
        self.theta
            .slice_rows(self.zones + self.actions, self.disturbances)
            .expect("in range")
    }

    pub fn intercept(&self) -> &Tensor {
        &self.intercept
    }

    /// One prediction per row of `(s, a, δ)`.
    pub fn predict(&self, s: &Tensor, a: &Tensor, d: &Tensor) -> Result<Tensor> {
        Tensor::concat_cols(&[s, a, d])?.matmul(&self.theta)?.add_row(&self.intercept)
    }

    /// States `s₁..s_T` from `s0` under `actions` and `disturbances`.
    pub fn rollout(&self, s0: &[f64], actions: &Tensor, disturbances: &Tensor) -> Result<Tensor> {
        let t_len = actions.rows();
        if s0.len() != self.zones || actions.cols() != self.actions || disturbances.cols() != self.disturbances || disturbances.rows() != t_len {
            return Err(Error::shape(
                "linear rollout",
                format!("s:{} a:{} d:{}", self.zones, self.actions, self.disturbances),
                format!("s:{} a:{} d:{}", s0.len(), actions.cols(), disturbances.cols()),
            ));
        }
        let inputs = Tensor::concat_cols(&[actions, disturbances])?
            .matmul(&self.theta.slice_rows(self.zones, self.actions + self.disturbances)?)?
            .add_row(&self.intercept)?;
        let state_block = self.state_block();
        let mut out = Tensor::zeros(t_len, self.zones);
        let mut prev = Tensor::row(s0.to_vec());
        for t in 0..t_len {
            let next = prev.matmul(&state_block)?;
            let row = out.row_slice_mut(t);
            for ((o, &x), &u) in row.iter_mut().zip(next.as_slice()).zip(inputs.row_slice(t)) {
                *o = x + u;
            }
            prev = Tensor::row(row.to_vec());
        }
        Ok(out)
    }

    /// `C̄` of `actions` under this model's rollout, its gradient with respect
    /// to the actions, and the rolled-out states.
    pub fn objective_and_gradient(&self, actions: &Tensor, problem: &OptProblem) -> Result<(f64, Tensor, Tensor)> {
        let states = self.rollout(&problem.initial_state, actions, &problem.forecast)?;
        let value = penalty_objective(actions, &states, problem)?;
        let t_len = problem.horizon();
        let two_hinge = |x: f64, lo: f64, hi: f64| 2.0 * ((x - hi).max(0.0) - (lo - x).max(0.0));

        // Adjoint pₜ = ∂C/∂sₜ including every later step's dependence.
        let state_t = self.state_block().transpose();
        let action_t = self.action_block().transpose();
        let mut grad = Tensor::zeros(t_len, self.actions);
        let mut carry = Tensor::zeros(1, self.zones);
        for t in (0..t_len).rev() {
            let direct: Vec<f64> = (0..self.zones)
                .map(|i| {
                    problem.temperature_penalty[t]
                        * two_hinge(
                            states.get(t, i),
                            problem.comfort_lower.get(t, i),
                            problem.comfort_upper.get(t, i),
                        )
                })
                .collect();
            let adj = Tensor::row(direct).add(&carry)?;
            let through_b = adj.matmul(&action_t)?;
            let price = problem.prices[t] * problem.dt_hours;
            for (j, g) in grad.row_slice_mut(t).iter_mut().enumerate() {
                *g = price
                    + through_b.get(0, j)
                    + problem.action_penalty
                        * two_hinge(
                            actions.get(t, j),
                            problem.action_lower.get(t, j),
                            problem.action_upper.get(t, j),
                        );
            }
            carry = adj.matmul(&state_t)?;
        }
        Ok((value, grad, states))
    }

    /// Dec-side cost terms of `actions` under this model.
    pub fn rollout_cost(&self, actions: &Tensor, problem: &OptProblem) -> Result<super::CostTerms> {
        let s = self.rollout(&problem.initial_state, actions, &problem.forecast)?;
        cost(actions, &s, problem)
    }
}

impl OneStepPredictor for LinearModel {
    fn predict_batch(&self, s: &Tensor, a: &Tensor, d: &Tensor) -> Result<Tensor> {
        self.predict(s, a, d)
    }
}
