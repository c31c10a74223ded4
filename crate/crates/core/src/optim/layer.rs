//! The penalty objective as a graph of three primitives: a weighted sum
//! `w·x`, a weighted square `w·x²` (scale by `√w`, then square) and a
//! weighted hinge square `w·[x − x₀]₊²` (shift, ReLU, scale by `√w`, square).
//! Weights are per time step; row `t` of `x` is scaled by `w[t]`.

use crate::autodiff::{Axis, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::OptProblem;

/// `Σₜ w[t]·Σᵢ x[t,i]` as a single linear node.
pub fn linear_node(graph: &mut Graph, x: NodeId, w: &[f64]) -> NodeId {
    let weights = graph.constant(Tensor::row(w.to_vec()));
    let projected = graph.matmul(weights, x);
    graph.sum(projected)
}

fn sqrt_weights(w: &[f64]) -> Result<Tensor> {
    if let Some((t, &bad)) = w.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::Config(format!(
            "squared-term weight {bad} at step {t} must be nonnegative"
        )));
    }
    Ok(Tensor::diag(&w.iter().map(|v| v.sqrt()).collect::<Vec<_>>()))
}

/// `Σₜ w[t]·Σᵢ x[t,i]²`.
pub fn weighted_square_node(graph: &mut Graph, x: NodeId, w: &[f64]) -> Result<NodeId> {
    let scale = graph.constant(sqrt_weights(w)?);
    let scaled = graph.matmul(scale, x);
    let sq = graph.square(scaled);
    Ok(graph.sum(sq))
}

/// `Σₜ w[t]·Σᵢ [x[t,i] − x0[t,i]]₊²`.
pub fn hinge_square_node(graph: &mut Graph, x: NodeId, x0: &Tensor, w: &[f64]) -> Result<NodeId> {
    let scale = graph.constant(sqrt_weights(w)?);
    let shift = graph.constant(x0.scale(-1.0));
    let shifted = graph.add(x, shift);
    let active = graph.relu(shifted);
    let scaled = graph.matmul(scale, active);
    let sq = graph.square(scaled);
    Ok(graph.sum(sq))
}

/// Appends `C̄(a, s)` for `problem` to `graph`, with `actions` a `T × A` node
/// and `states` a `T × Z` node. Returns the scalar root.
pub fn build_objective_layer(
    graph: &mut Graph,
    problem: &OptProblem,
    actions: NodeId,
    states: NodeId,
) -> Result<NodeId> {
    let t = problem.horizon();
    let power_w: Vec<f64> = problem.prices.iter().map(|p| p * problem.dt_hours).collect();
    let rho = vec![problem.action_penalty; t];

    let power = linear_node(graph, actions, &power_w);
    let hot = hinge_square_node(graph, states, &problem.comfort_upper, &problem.temperature_penalty)?;
    let neg_states = graph.scale(states, -1.0);
    let cold = hinge_square_node(
        graph,
        neg_states,
        &problem.comfort_lower.scale(-1.0),
        &problem.temperature_penalty,
    )?;
    let above = hinge_square_node(graph, actions, &problem.action_upper, &rho)?;
    let neg_actions = graph.scale(actions, -1.0);
    let below = hinge_square_node(graph, neg_actions, &problem.action_lower.scale(-1.0), &rho)?;
    let terms = graph.concat(&[power, hot, cold, above, below], Axis::Cols);
    Ok(graph.sum(terms))
}

/// A standalone objective graph over action and state leaves.
#[derive(Clone, Debug)]
pub struct ObjectiveGraph {
    pub graph: Graph,
    pub actions: NodeId,
    pub states: NodeId,
    pub root: NodeId,
}

impl ObjectiveGraph {
    pub fn evaluate(&mut self, a: &Tensor, s: &Tensor) -> Result<f64> {
        self.graph.bind(self.actions, a.clone())?;
        self.graph.bind(self.states, s.clone())?;
        self.graph.evaluate()?;
        Ok(self.graph.value(self.root).expect("evaluated").get(0, 0))
    }
}

pub fn objective_graph(problem: &OptProblem) -> Result<ObjectiveGraph> {
    let mut graph = Graph::new();
    let actions = graph.leaf("a", problem.horizon(), problem.action_dim());
    let states = graph.leaf("s", problem.horizon(), problem.zones());
    let root = build_objective_layer(&mut graph, problem, actions, states)?;
    Ok(ObjectiveGraph {
        graph,
        actions,
        states,
        root,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_eval(build: impl FnOnce(&mut Graph, NodeId) -> NodeId, x: f64) -> f64 {
        let mut g = Graph::new();
        let xin = g.leaf("x", 1, 1);
        build(&mut g, xin);
        g.forward(&[("x", &Tensor::scalar(x))]).unwrap().get(0, 0)
    }

    #[test]
    fn primitive_examples() {
        assert_eq!(scalar_eval(|g, x| linear_node(g, x, &[3.0]), 2.0), 6.0);
        assert_eq!(
            scalar_eval(|g, x| weighted_square_node(g, x, &[4.0]).unwrap(), 0.5),
            1.0
        );
        let hinge = scalar_eval(
            |g, x| hinge_square_node(g, x, &Tensor::scalar(1.0), &[2.0]).unwrap(),
            3.0,
        );
        assert!((hinge - 8.0).abs() < 1e-12);
        assert_eq!(
            scalar_eval(
                |g, x| hinge_square_node(g, x, &Tensor::scalar(1.0), &[2.0]).unwrap(),
                0.0
            ),
            0.0
        );
    }

    #[test]
    fn negative_square_weight_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf("x", 2, 1);
        assert!(weighted_square_node(&mut g, x, &[1.0, -0.5]).is_err());
        assert!(hinge_square_node(&mut g, x, &Tensor::zeros(2, 1), &[-1.0, 0.0]).is_err());
        assert!(weighted_square_node(&mut g, x, &[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn per_step_weights_apply_by_row() {
        let mut g = Graph::new();
        let x = g.leaf("x", 2, 2);
        weighted_square_node(&mut g, x, &[1.0, 9.0]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, -1.0]]).unwrap();
        let out = g.forward(&[("x", &v)]).unwrap().get(0, 0);
        assert!((out - (1.0 + 4.0 + 9.0 + 9.0)).abs() < 1e-12);
    }

    /// A random problem with `T ≤ 6`, `Z, A ≤ 4` and actions/states that
    /// straddle their bounds, plus matching `(a, s)`.
    fn random_instance(seed: u64) -> (OptProblem, Tensor, Tensor) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = rng.random_range(1..=6);
        let z = rng.random_range(1..=4);
        let a = rng.random_range(1..=4);
        let mut fill = |r: usize, c: usize, lo: f64, hi: f64| Tensor::from_fn(r, c, |_, _| rng.random_range(lo..hi));
        let comfort_lower = fill(t, z, 19.0, 22.0);
        let comfort_upper = comfort_lower.add(&fill(t, z, 0.0, 4.0)).unwrap();
        let action_upper = fill(t, a, 5.0, 15.0);
        let actions = fill(t, a, -3.0, 18.0);
        let states = fill(t, z, 16.0, 28.0);
        let prices = fill(1, t, 0.0, 0.3).into_vec();
        let temperature_penalty = fill(1, t, 0.0, 0.01).into_vec();
        let problem = OptProblem {
            dt_hours: 0.25,
            prices,
            temperature_penalty,
            action_penalty: rng.random_range(0.0..20.0),
            comfort_lower,
            comfort_upper,
            action_lower: Tensor::zeros(t, a),
            action_upper,
            initial_state: vec![22.0; z],
            forecast: Tensor::zeros(t, 1),
            actual: None,
        };
        (problem, actions, states)
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(100))]

        #[test]
        fn graph_objective_equals_direct_arithmetic(seed in proptest::prelude::any::<u64>()) {
            let (problem, a, s) = random_instance(seed);
            let mut g = objective_graph(&problem).unwrap();
            let graph = g.evaluate(&a, &s).unwrap();
            let direct = crate::optim::penalty_objective(&a, &s, &problem).unwrap();
            proptest::prop_assert!((graph - direct).abs() < 1e-9, "graph {graph} direct {direct}");
        }
    }
}
