//! Parameterised layers on top of the autodiff [`Graph`].
//!
//! Parameters live in a [`ParamStore`] between steps. Every forward pass
//! opens a [`Session`], which copies the parameters into a fresh graph as
//! leaves; gradients are read back out with [`Session::gradients`].

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter registry. Names are unique; iteration follows
/// registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value with that of the same-named parameter in `other`.
    /// Both stores must hold the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for i in 0..self.len() {
            let src = other.by_name(&self.names[i])?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    self.names[i],
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradients, indexed like the originating [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(grads: Vec<Option<Tensor>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so the global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in self.grads.iter_mut().flatten() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    /// Adds `other` into `self` elementwise.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => {
                    for (a, b) in d.data_mut().iter_mut().zip(s.data()) {
                        *a += b;
                    }
                }
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
    }
}

/// A forward pass: a graph with every parameter of a store bound as a leaf.
pub struct Session {
    pub graph: Graph,
    vars: Vec<Var>,
}

impl Session {
    pub fn new(store: &ParamStore, requires_grad: bool) -> Self {
        let mut graph = Graph::new();
        let vars = store
            .tensors
            .iter()
            .map(|t| graph.leaf(t.clone(), requires_grad))
            .collect();
        Self { graph, vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.graph.backward(loss)?;
        Ok(self.gradients())
    }

    pub fn gradients(&self) -> Gradients {
        Gradients::new(
            self.vars
                .iter()
                .map(|&v| self.graph.grad(v).cloned())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    LeakyRelu(f64),
    Elu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Elu => g.elu(x, 1.0),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Identity => write!(f, "identity"),
            Activation::Relu => write!(f, "relu"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::Sigmoid => write!(f, "sigmoid"),
            Activation::LeakyRelu(s) => write!(f, "leaky_relu:{s}"),
            Activation::Elu => write!(f, "elu"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" => Activation::Identity,
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "elu" => Activation::Elu,
            "leaky_relu" => Activation::LeakyRelu(0.01),
            other => match other.strip_prefix("leaky_relu:") {
                Some(slope) => Activation::LeakyRelu(
                    slope
                        .parse()
                        .map_err(|_| Error::Config(format!("bad leaky_relu slope `{slope}`")))?,
                ),
                None => return Err(Error::Config(format!("unknown activation `{other}`"))),
            },
        })
    }
}

impl From<Activation> for String {
    fn from(a: Activation) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for Activation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Xavier/Glorot uniform bound.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = x · Wᵀ + b` with `W: [out, in]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let a = xavier_bound(in_dim, out_dim);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[out_dim, in_dim], -a, a, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.var(self.weight);
        let b = s.var(self.bias);
        let y = s.graph.matmul_bt(x, w)?;
        s.graph.add(y, b)
    }
}

/// A stack of linear layers with an activation between them and, optionally,
/// after the last one.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub activate_last: bool,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; a single entry gives the identity.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        activate_last: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            activation,
            activate_last,
        })
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.out_dim)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i < last || self.activate_last {
                h = self.activation.apply(&mut s.graph, h)?;
            }
        }
        Ok(h)
    }
}

/// Single-layer GRU cell with gate order (reset, update, candidate):
///
/// ```text
/// r = σ(W_r x + b_r + U_r h + c_r)
/// u = σ(W_u x + b_u + U_u h + c_u)
/// c = tanh(W_c x + b_c + r ⊙ (U_c h + c_c))
/// h' = u ⊙ h + (1 − u) ⊙ c
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let gate_block = |fan_in: usize, rng: &mut R| {
            let a = xavier_bound(fan_in, hidden);
            let mut data = Vec::with_capacity(3 * hidden * fan_in);
            for _ in 0..3 {
                data.extend(Tensor::uniform(&[hidden, fan_in], -a, a, rng).into_data());
            }
            Tensor::new(&[3 * hidden, fan_in], data)
        };
        let w_ih = store.add(format!("{name}.w_ih"), gate_block(input, rng)?)?;
        let w_hh = store.add(format!("{name}.w_hh"), gate_block(hidden, rng)?)?;
        let b_ih = store.add(format!("{name}.b_ih"), Tensor::zeros(&[3 * hidden]))?;
        let b_hh = store.add(format!("{name}.b_hh"), Tensor::zeros(&[3 * hidden]))?;
        Ok(Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            input,
            hidden,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, h_prev: Var) -> Result<Var> {
        let hd = self.hidden;
        if s.graph.shape(x).last() != Some(&self.input) {
            return Err(Error::ShapeMismatch {
                op: "gru_step",
                lhs: s.graph.shape(x).to_vec(),
                rhs: vec![self.input],
            });
        }
        if s.graph.shape(h_prev).last() != Some(&hd) {
            return Err(Error::ShapeMismatch {
                op: "gru_step",
                lhs: s.graph.shape(h_prev).to_vec(),
                rhs: vec![hd],
            });
        }
        let (w_ih, w_hh, b_ih, b_hh) = (
            s.var(self.w_ih),
            s.var(self.w_hh),
            s.var(self.b_ih),
            s.var(self.b_hh),
        );
        let g = &mut s.graph;
        let gi = g.matmul_bt(x, w_ih)?;
        let gi = g.add(gi, b_ih)?;
        let gh = g.matmul_bt(h_prev, w_hh)?;
        let gh = g.add(gh, b_hh)?;

        let gi_r = g.narrow(gi, 1, 0, hd)?;
        let gh_r = g.narrow(gh, 1, 0, hd)?;
        let r = g.add(gi_r, gh_r)?;
        let r = g.sigmoid(r)?;

        let gi_u = g.narrow(gi, 1, hd, hd)?;
        let gh_u = g.narrow(gh, 1, hd, hd)?;
        let u = g.add(gi_u, gh_u)?;
        let u = g.sigmoid(u)?;

        let gi_c = g.narrow(gi, 1, 2 * hd, hd)?;
        let gh_c = g.narrow(gh, 1, 2 * hd, hd)?;
        let rc = g.mul(r, gh_c)?;
        let c = g.add(gi_c, rc)?;
        let c = g.tanh(c)?;

        let keep = g.mul(u, h_prev)?;
        let one_minus_u = g.affine(u, -1.0, 1.0)?;
        let fresh = g.mul(one_minus_u, c)?;
        g.add(keep, fresh)
    }
}
