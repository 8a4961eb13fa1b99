//! Named parameter tensors and their binding onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Overwrites a parameter value, checking the shape.
    pub fn assign(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on the tape; `trainable` decides which ones get gradients.
    pub fn bind(&self, graph: &mut Graph, trainable: impl Fn(&Param) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(p) {
                    graph.variable(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Binds everything as constants (inference).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Binding {
        self.bind(graph, |_| false)
    }
}

/// Graph handles for the parameters of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients; `None` for parameters the root does not depend on.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Matrix>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

pub(crate) fn normal_matrix(
    rng: &mut impl Rng,
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
) -> Matrix {
    let dist = Normal::new(mean, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Glorot-normal initialisation for a `fan_in x fan_out` weight.
pub(crate) fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_matrix(rng, fan_in, fan_out, 0.0, std)
}

/// An affine map `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, glorot(rng, fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), group, Matrix::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn register_zero(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, Matrix::zeros(fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), group, Matrix::zeros(1, fan_out));
        Self { weight, bias }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }

    pub fn apply(&self, graph: &mut Graph, binding: &Binding, x: Var) -> Var {
        let h = graph.matmul(x, binding.var(self.weight));
        graph.add_row_bias(h, binding.var(self.bias))
    }
}

/// Pointwise nonlinearity choice for the small MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, graph: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => graph.tanh(x),
            Activation::Relu => graph.relu(x),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }
}
