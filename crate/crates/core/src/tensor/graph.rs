use std::fmt::Debug;
use std::sync::Arc;

use super::ops::Primitive;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Index of a node inside its [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the built-in primitive set.
///
/// `forward` may return auxiliary tensors that `backward` receives again as
/// `saved`. `needs[i]` tells whether input `i` wants a gradient.
pub trait Function<T: Real>: Send + Sync + Debug {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)>;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        saved: &[Tensor<T>],
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    Prim(Primitive<T>),
    Custom(Arc<dyn Function<T>>),
}

impl<T: Real> Op<T> {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::Prim(p) => p.name().into(),
            Op::Custom(f) => f.name().into(),
        }
    }

    fn eval(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        match self {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Prim(p) => p.eval(inputs),
            Op::Custom(f) => f.forward(inputs),
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    saved: Vec<Tensor<T>>,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order, so
/// insertion order is a topological order.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar output with respect to every differentiable leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros shaped like `like` when the output does not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, like: &[usize]) -> Tensor<T> {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.to_vec()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameters, or anything a gradient is wanted for).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            saved: Vec::new(),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_name(&self, id: NodeId) -> String {
        self.nodes[id.0].op.name()
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Replace a leaf value; call [`Graph::forward`] afterwards to propagate.
    pub fn set_value(&mut self, id: NodeId, value: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::InvalidArgument(format!("node {} is not a leaf", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape(
                format!("set_value(node {})", id.0),
                format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        Ok(())
    }

    pub(crate) fn leaf_value_mut(&mut self, id: NodeId) -> &mut Tensor<T> {
        assert!(self.is_leaf(id));
        &mut self.nodes[id.0].value
    }

    fn push_op(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let id = self.nodes.len();
        let values: Vec<&Tensor<T>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let (value, saved) = op.eval(&values).map_err(|e| annotate(e, id, &op.name()))?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            saved,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    pub fn apply(&mut self, prim: Primitive<T>, inputs: &[NodeId]) -> Result<NodeId> {
        self.push_op(Op::Prim(prim), inputs)
    }

    pub fn custom(&mut self, f: Arc<dyn Function<T>>, inputs: &[NodeId]) -> Result<NodeId> {
        self.push_op(Op::Custom(f), inputs)
    }

    /// Re-evaluate every non-leaf node in topological order from current leaf values.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (value, saved) = {
                let node = &self.nodes[i];
                let values: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|j| &self.nodes[j.0].value).collect();
                node.op.eval(&values).map_err(|e| annotate(e, i, &node.op.name()))?
            };
            self.nodes[i].value = value;
            self.nodes[i].saved = saved;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<T>> {
        let out_val = &self.nodes[output.0].value;
        if out_val.numel() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::ones(out_val.shape().to_vec()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|j| &self.nodes[j.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|j| self.nodes[j.0].requires_grad).collect();
            let input_grads = match &node.op {
                Op::Prim(p) => p.vjp(&inputs, &node.value, &node.saved, &g, &needs),
                Op::Custom(f) => f.backward(&inputs, &node.value, &node.saved, &g, &needs),
                Op::Leaf => unreachable!(),
            }
            .map_err(|e| annotate(e, i, &node.op.name()))?;
            for ((j, gi), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let Some(gi) = gi else { continue };
                if !need {
                    continue;
                }
                if !gi.all_finite() {
                    return Err(Error::NonFinite {
                        node: i,
                        op: node.op.name(),
                    });
                }
                match &mut grads[j.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (i, g) in grads.iter_mut().enumerate() {
            let node = &self.nodes[i];
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn annotate(e: Error, node: usize, op: &str) -> Error {
    match e {
        Error::Shape { op: inner, detail } => Error::Shape {
            op: format!("{inner} (node {node}, {op})"),
            detail,
        },
        other => other,
    }
}

// Builder helpers, one per primitive.
impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.apply(Primitive::Scale(s), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.apply(Primitive::AddScalar(s), &[a])
    }

    /// `x + b` with the 1-D `b` broadcast along `axis` of `x`.
    pub fn add_broadcast(&mut self, x: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Primitive::AddBroadcast { axis }, &[x, b])
    }

    pub fn mul_broadcast(&mut self, x: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Primitive::MulBroadcast { axis }, &[x, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.apply(Primitive::Conv3d { stride, pad }, &[x, w])
    }

    pub fn conv1d_depthwise(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Conv1dDepthwise, &[x, w])
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        self.apply(Primitive::UpsampleNearest { factor }, &[x])
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Silu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Softplus, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Square, &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Primitive::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(Primitive::Slice { axis, start, len }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.apply(Primitive::Permute(axes.to_vec()), &[x])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn l2_normalize(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        self.apply(Primitive::L2Normalize { eps }, &[x])
    }

    pub fn index_select(&mut self, x: NodeId, axis: usize, indices: Vec<usize>) -> Result<NodeId> {
        self.apply(
            Primitive::IndexSelect {
                axis,
                indices: indices.into(),
            },
            &[x],
        )
    }

    /// `x @ w + b` over the last axis of an arbitrary-rank `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let cin = *shape.last().expect("rank >= 1");
        let rows = shape.iter().product::<usize>() / cin;
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, cin])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_broadcast(y, b, 1)?;
        }
        let cout = self.shape(y)[1];
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = cout;
        self.reshape(y, &out_shape)
    }
}
