//! Fully connected ReLU networks and the adaptive-moment optimizer used to
//! train them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`; inputs are row vectors.
    pub weight: Tensor,
    /// `1 × fan_out`.
    pub bias: Tensor,
}

/// Multilayer perceptron with ReLU on hidden layers and an identity output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

/// How network weights enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weights {
    /// Named leaves, so gradients are reported for them.
    Trainable,
    /// Constants; only the data path is differentiated.
    Frozen,
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight =
                    Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound));
                Layer {
                    weight,
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Self {
            widths: widths.to_vec(),
            layers,
        }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("an MLP needs at least one layer".into()))?;
        let mut widths = vec![first.weight.rows()];
        for (i, l) in layers.iter().enumerate() {
            if l.weight.rows() != *widths.last().unwrap() || l.bias.shape() != (1, l.weight.cols())
            {
                return Err(Error::shape(
                    format!("layer {i}"),
                    format!("{}x_ weight with matching bias", widths.last().unwrap()),
                    format!(
                        "{}x{} weight, {}x{} bias",
                        l.weight.rows(),
                        l.weight.cols(),
                        l.bias.rows(),
                        l.bias.cols()
                    ),
                ));
            }
            widths.push(l.weight.cols());
        }
        Ok(Self { widths, layers })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameters in `[w0, b0, w1, b1, ...]` order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Batched forward pass on `batch × input_dim` rows.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight)?.add_row(&l.bias)?;
            if i < last {
                h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Appends this network to `graph`, applied to node `x`. Returns the output
    /// node and, for trainable weights, the parameter leaves in [`Mlp::params`]
    /// order (named `{prefix}.w{i}` / `{prefix}.b{i}`).
    pub fn build(
        &self,
        graph: &mut Graph,
        x: NodeId,
        prefix: &str,
        weights: Weights,
    ) -> (NodeId, Vec<NodeId>) {
        match weights {
            Weights::Trainable => {
                let params: Vec<NodeId> = self
                    .layers
                    .iter()
                    .enumerate()
                    .flat_map(|(i, l)| {
                        [
                            graph.leaf_with(&format!("{prefix}.w{i}"), l.weight.clone()),
                            graph.leaf_with(&format!("{prefix}.b{i}"), l.bias.clone()),
                        ]
                    })
                    .collect();
                (self.apply(graph, x, &params), params)
            }
            Weights::Frozen => {
                let consts = self.constants(graph);
                (self.apply(graph, x, &consts), Vec::new())
            }
        }
    }

    /// Weight and bias constants in [`Mlp::params`] order, for reuse across
    /// several [`Mlp::apply`] calls.
    pub fn constants(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.params()
            .into_iter()
            .map(|p| graph.constant(p.clone()))
            .collect()
    }

    /// Applies the network to `x` using existing parameter nodes.
    pub fn apply(&self, graph: &mut Graph, x: NodeId, params: &[NodeId]) -> NodeId {
        assert_eq!(params.len(), 2 * self.layers.len(), "one weight and bias node per layer");
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let z = graph.matmul(h, params[2 * i]);
            h = graph.add(z, params[2 * i + 1]);
            if i < last {
                h = graph.relu(h);
            }
        }
        h
    }
}

/// Adaptive-moment first-order optimizer over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|(r, c)| (Tensor::zeros(r, c), Tensor::zeros(r, c)))
            .unzip();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[k].as_mut_slice();
            let v = self.v[k].as_mut_slice();
            for (((p, &g), m), v) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
