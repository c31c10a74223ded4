//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes in topological order: a node
//! may only reference nodes created before it. Leaves are bound to values
//! before [`Graph::forward`]; constants carry their value from construction.
//! [`Graph::backward`] walks the list in reverse, applying the chain rule
//! from a scalar root.
//!
//! The op vocabulary is deliberately small: matrix product, bias/elementwise
//! addition, ReLU, elementwise square, positive part, scalar scaling, full
//! sum, concatenation and slicing. Subtraction is expressed as addition of a
//! `-1`-scaled node.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Stack vertically (along rows).
    Rows,
    /// Stack horizontally (along columns).
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: String, shape: (usize, usize) },
    Constant,
    MatMul(NodeId, NodeId),
    /// Elementwise sum; the right operand may be a 1×cols row that is
    /// broadcast over every row of the left operand.
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Square(NodeId),
    PositivePart(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Concat(Vec<NodeId>, Axis),
    Slice {
        src: NodeId,
        axis: Axis,
        start: usize,
        len: usize,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add-bias",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::PositivePart(_) => "positive-part",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    /// Whether a node depends on any leaf; constants-only subgraphs are
    /// skipped during backward.
    needs_grad: Vec<bool>,
    leaves: HashMap<String, NodeId>,
}

/// Gradients of a scalar root with respect to every node it depends on.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Option<Tensor>) -> NodeId {
        let id = NodeId(self.ops.len());
        let needs_grad = match &op {
            Op::Leaf { .. } => true,
            Op::Constant => false,
            Op::MatMul(a, b) | Op::AddBias(a, b) => self.needs_grad[a.0] || self.needs_grad[b.0],
            Op::Relu(a) | Op::Square(a) | Op::PositivePart(a) | Op::Scale(a, _) | Op::Sum(a) => {
                self.needs_grad[a.0]
            }
            Op::Concat(parts, _) => parts.iter().any(|p| self.needs_grad[p.0]),
            Op::Slice { src, .. } => self.needs_grad[src.0],
        };
        self.ops.push(op);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        id
    }

    /// A named input or parameter whose value is bound before each forward pass.
    pub fn leaf(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        let id = self.push(
            Op::Leaf {
                name: name.to_owned(),
                shape: (rows, cols),
            },
            None,
        );
        self.leaves.insert(name.to_owned(), id);
        id
    }

    /// A leaf bound immediately to `value`.
    pub fn leaf_with(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.leaf(name, value.rows(), value.cols());
        self.values[id.0] = Some(value);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, Some(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b), None)
    }

    pub fn add(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias), None)
    }

    /// `a - b`, built from scale and add.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a), None)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a), None)
    }

    pub fn positive_part(&mut self, a: NodeId) -> NodeId {
        self.push(Op::PositivePart(a), None)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor), None)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), None)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> NodeId {
        self.push(Op::Concat(parts.to_vec(), axis), None)
    }

    pub fn slice(&mut self, src: NodeId, axis: Axis, start: usize, len: usize) -> NodeId {
        self.push(
            Op::Slice {
                src,
                axis,
                start,
                len,
            },
            None,
        )
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        match &self.ops[id.0] {
            Op::Leaf { shape, name } => {
                if *shape != value.shape() {
                    return Err(Error::Graph {
                        node: id.0,
                        op: "leaf",
                        message: format!(
                            "input '{name}' expects {}x{}, got {}",
                            shape.0,
                            shape.1,
                            shape_str(&value)
                        ),
                    });
                }
                self.values[id.0] = Some(value);
                Ok(())
            }
            op => Err(Error::Graph {
                node: id.0,
                op: op.kind(),
                message: "only leaves can be bound".into(),
            }),
        }
    }

    pub fn bind_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.leaf_id(name).ok_or_else(|| Error::Graph {
            node: usize::MAX,
            op: "leaf",
            message: format!("no input named '{name}'"),
        })?;
        self.bind(id, value)
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Binds `inputs` by name, evaluates every node and returns the value of
    /// the last node added.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor)]) -> Result<&Tensor> {
        for (name, value) in inputs {
            self.bind_name(name, (*value).clone())?;
        }
        self.evaluate()?;
        let last = self.ops.len().checked_sub(1).ok_or_else(|| Error::Graph {
            node: 0,
            op: "graph",
            message: "empty graph".into(),
        })?;
        Ok(self.values[last].as_ref().expect("evaluated"))
    }

    /// Evaluates every non-leaf node using the currently bound leaves.
    pub fn evaluate(&mut self) -> Result<()> {
        for i in 0..self.ops.len() {
            let out = match &self.ops[i] {
                Op::Leaf { name, .. } => {
                    if self.values[i].is_none() {
                        return Err(self.err(i, format!("input '{name}' is not bound")));
                    }
                    continue;
                }
                Op::Constant => continue,
                op => self.compute(i, op)?,
            };
            if !out.is_finite() {
                return Err(self.err(i, "produced a non-finite value".into()));
            }
            self.values[i] = Some(out);
        }
        Ok(())
    }

    fn err(&self, i: usize, message: String) -> Error {
        Error::Graph {
            node: i,
            op: self.ops[i].kind(),
            message,
        }
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0]
            .as_ref()
            .expect("parents are evaluated before children")
    }

    fn compute(&self, i: usize, op: &Op) -> Result<Tensor> {
        let wrap = |e: Error| self.err(i, e.to_string());
        Ok(match op {
            Op::Leaf { .. } | Op::Constant => unreachable!(),
            Op::MatMul(a, b) => self.val(*a).matmul(self.val(*b)).map_err(wrap)?,
            Op::AddBias(a, b) => {
                let (x, bias) = (self.val(*a), self.val(*b));
                if bias.shape() == x.shape() {
                    x.add(bias).map_err(wrap)?
                } else {
                    x.add_row(bias).map_err(wrap)?
                }
            }
            Op::Relu(a) | Op::PositivePart(a) => self.val(*a).map(|v| v.max(0.0)),
            Op::Square(a) => self.val(*a).map(|v| v * v),
            Op::Scale(a, k) => self.val(*a).scale(*k),
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Concat(parts, axis) => {
                let ts: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                match axis {
                    Axis::Rows => Tensor::concat_rows(&ts),
                    Axis::Cols => Tensor::concat_cols(&ts),
                }
                .map_err(wrap)?
            }
            Op::Slice {
                src,
                axis,
                start,
                len,
            } => match axis {
                Axis::Rows => self.val(*src).slice_rows(*start, *len),
                Axis::Cols => self.val(*src).slice_cols(*start, *len),
            }
            .map_err(wrap)?,
        })
    }

    /// Gradients of the scalar `root` with respect to every node it depends on.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_val = self
            .value(root)
            .ok_or_else(|| self.err(root.0, "backward before forward".into()))?;
        if root_val.shape() != (1, 1) {
            return Err(self.err(
                root.0,
                format!("backward needs a scalar root, got {}", shape_str(root_val)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Slice {
                src,
                axis,
                start,
                len,
            } = &self.ops[i]
            {
                // Accumulate straight into the source's slot.
                if self.needs_grad[src.0] {
                    let (r, c) = self.val(*src).shape();
                    let acc = grads[src.0].get_or_insert_with(|| Tensor::zeros(r, c));
                    add_block(acc, &g, *axis, *start, *len);
                }
                grads[i] = Some(g);
                continue;
            }
            let contributions = self.local_grads(i, &g)?;
            grads[i] = Some(g);
            for (parent, contrib) in contributions {
                if !self.needs_grad[parent.0] {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.axpy(1.0, &contrib).map_err(|e| self.err(i, e.to_string()))?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let wrap = |e: Error| self.err(i, e.to_string());
        let mask = |a: NodeId| -> Tensor {
            // Subgradient 0 at exactly zero.
            self.val(a)
                .zip_map(g, |x, gi| if x > 0.0 { gi } else { 0.0 })
                .expect("same shape")
        };
        Ok(match &self.ops[i] {
            Op::Leaf { .. } | Op::Constant => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.needs_grad[a.0] {
                    out.push((*a, g.matmul_t(self.val(*b)).map_err(wrap)?));
                }
                if self.needs_grad[b.0] {
                    out.push((*b, self.val(*a).t_matmul(g).map_err(wrap)?));
                }
                out
            }
            Op::AddBias(a, b) => {
                let gb = if self.val(*b).shape() == g.shape() {
                    g.clone()
                } else {
                    g.sum_rows()
                };
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Relu(a) | Op::PositivePart(a) => vec![(*a, mask(*a))],
            Op::Square(a) => {
                let ga = self.val(*a).zip_map(g, |x, gi| 2.0 * x * gi).map_err(wrap)?;
                vec![(*a, ga)]
            }
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::Sum(a) => {
                let (r, c) = self.val(*a).shape();
                vec![(*a, Tensor::filled(r, c, g.get(0, 0)))]
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let (r, c) = self.val(*p).shape();
                    let piece = match axis {
                        Axis::Rows => {
                            let t = g.slice_rows(offset, r);
                            offset += r;
                            t
                        }
                        Axis::Cols => {
                            let t = g.slice_cols(offset, c);
                            offset += c;
                            t
                        }
                    }
                    .map_err(wrap)?;
                    out.push((*p, piece));
                }
                out
            }
            Op::Slice { .. } => unreachable!("slices are accumulated in place"),
        })
    }
}

/// `acc[block] += g`, where the block is `len` rows or columns from `start`.
fn add_block(acc: &mut Tensor, g: &Tensor, axis: Axis, start: usize, len: usize) {
    match axis {
        Axis::Rows => {
            for k in 0..len {
                for (a, v) in acc.row_slice_mut(start + k).iter_mut().zip(g.row_slice(k)) {
                    *a += v;
                }
            }
        }
        Axis::Cols => {
            for row in 0..acc.rows() {
                for (a, v) in acc.row_slice_mut(row)[start..start + len].iter_mut().zip(g.row_slice(row)) {
                    *a += v;
                }
            }
        }
    }
}

/// Forward-difference gradient `(f(x + h·eᵢ) − f(x)) / h` for every coordinate.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    assert!(h > 0.0, "finite difference step must be positive");
    let base = f(x);
    if !base.is_finite() {
        return Err(Error::NonFiniteCoordinate {
            coordinate: usize::MAX,
            value: base,
        });
    }
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let v = f(&probe);
        probe.as_mut_slice()[i] = orig;
        if !v.is_finite() {
            return Err(Error::NonFiniteCoordinate {
                coordinate: i,
                value: v,
            });
        }
        grad.as_mut_slice()[i] = (v - base) / h;
    }
    Ok(grad)
}

/// Central-difference gradient `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn central_diff_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut grad = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        let d = (up - down) / (2.0 * h);
        if !d.is_finite() {
            return Err(Error::NonFiniteCoordinate {
                coordinate: i,
                value: d,
            });
        }
        grad.as_mut_slice()[i] = d;
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`: the relative error used by gradient checks.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a.sub(b).map(|d| d.norm_sq().sqrt()).unwrap_or(f64::INFINITY);
    diff / a.norm_sq().sqrt().max(b.norm_sq().sqrt()).max(floor)
}
