use std::ops::Index;

use rand::Rng;

use super::{Gradients, Graph, NodeId, Tensor};
use crate::error::Result;
use crate::scalar::{lit, Real};

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Parameter leaves of one graph, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding(Vec<NodeId>);

impl Index<ParamId> for Binding {
    type Output = NodeId;

    fn index(&self, id: ParamId) -> &NodeId {
        &self.0[id.0]
    }
}

impl Binding {
    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter()
    }

    pub fn tensor(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Insert every parameter as a differentiable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Binding {
        Binding(self.tensors.iter().map(|t| graph.leaf(t.clone())).collect())
    }

    /// Per-parameter gradients in store order (zeros where the output is independent).
    pub fn collect_grads(&self, binding: &Binding, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        binding
            .0
            .iter()
            .zip(&self.tensors)
            .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replace values by name from `other`; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in other.names.iter().zip(&other.tensors) {
            let Some(id) = self.find(name) else {
                return Err(crate::Error::Data(format!("unknown parameter {name}")));
            };
            if self.tensors[id.0].shape() != t.shape() {
                return Err(crate::Error::shape(
                    format!("load parameter {name}"),
                    format!("{:?} vs {:?}", self.tensors[id.0].shape(), t.shape()),
                ));
            }
            self.tensors[id.0] = t.clone();
        }
        if other.len() != self.len() {
            return Err(crate::Error::Data(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// Zero every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if n.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

fn uniform<T: Real, R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// `y = x @ W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(vec![in_dim, out_dim], bound, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform(vec![out_dim], bound, rng)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: NodeId) -> Result<NodeId> {
        g.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }

    pub fn param_count(in_dim: usize, out_dim: usize, bias: bool) -> usize {
        in_dim * out_dim + if bias { out_dim } else { 0 }
    }
}

/// Cubic-kernel 3D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv3dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel * kernel) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(vec![cout, cin, kernel, kernel, kernel], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: NodeId) -> Result<NodeId> {
        let y = g.conv3d(x, p[self.weight], self.stride, self.pad)?;
        g.add_broadcast(y, p[self.bias], 0)
    }

    pub fn param_count(cin: usize, cout: usize, kernel: usize) -> usize {
        cout * cin * kernel * kernel * kernel + cout
    }

    /// Re-initialize weights with a small normal (used for flow heads).
    pub fn init_small<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, std: f64, rng: &mut R) {
        let shape = store.get(self.weight).shape().to_vec();
        *store.get_mut(self.weight) = Tensor::randn(shape, std, rng);
    }
}

/// Layer normalization over the channel (last) axis.
#[derive(Clone, Debug)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, p[self.gamma], p[self.beta], lit(self.eps))
    }
}
