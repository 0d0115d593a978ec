//! Named parameter storage, deterministic initialization and graph binding.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Grads, Var};
use crate::tensor::Tensor;

/// Handle to a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Param(usize);

impl Param {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Param {
        self.names.push(name.into());
        self.tensors.push(t);
        Param(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, p: Param) -> &Tensor {
        &self.tensors[p.0]
    }

    pub fn get_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.tensors[p.0]
    }

    pub fn name(&self, p: Param) -> &str {
        &self.names[p.0]
    }

    pub fn find(&self, name: &str) -> Option<Param> {
        self.names.iter().position(|n| n == name).map(Param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces `name` with `t`, which must have the same shape.
    pub fn assign(&mut self, name: &str, t: Tensor) -> Result<()> {
        let p = self
            .find(name)
            .ok_or_else(|| invalid("param_set", alloc::format!("unknown parameter {name}")))?;
        self.tensors[p.0].same_shape("param_set", &t)?;
        self.tensors[p.0] = t;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub w: Param,
    pub b: Param,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearParams {
    pub w: Param,
    pub b: Param,
}

/// Creates parameters with weights and biases drawn uniformly from
/// `[-s, s]`, `s = sqrt(1 / fan_in)`.
pub struct ParamBuilder<'a> {
    set: &'a mut ParamSet,
    rng: ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(set: &'a mut ParamSet, seed: u64) -> Self {
        Self {
            set,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let s = libm::sqrt(1.0 / fan_in as f64);
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.random_range(-s..=s))
    }

    pub fn conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvParams {
        let fan_in = c_in * k * k;
        let w = self.uniform(&[c_out, c_in, k, k], fan_in);
        let b = self.uniform(&[c_out], fan_in);
        ConvParams {
            w: self.set.push(alloc::format!("{name}.weight"), w),
            b: self.set.push(alloc::format!("{name}.bias"), b),
            stride,
            pad,
        }
    }

    pub fn linear(&mut self, name: &str, d_out: usize, d_in: usize) -> LinearParams {
        let w = self.uniform(&[d_out, d_in], d_in);
        let b = self.uniform(&[d_out], d_in);
        LinearParams {
            w: self.set.push(alloc::format!("{name}.weight"), w),
            b: self.set.push(alloc::format!("{name}.bias"), b),
        }
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Param {
        self.set.push(name.to_string(), Tensor::full(shape, value))
    }
}

/// A graph with every parameter of a [`ParamSet`] bound as a leaf.
pub struct Session {
    pub graph: Graph,
    vars: Vec<Var>,
}

impl Session {
    pub fn new(params: &ParamSet) -> Self {
        let mut graph = Graph::new();
        let vars = params
            .tensors()
            .iter()
            .map(|t| graph.param(t.clone()))
            .collect();
        Self { graph, vars }
    }

    /// Wraps an existing graph whose leaves `vars` hold the parameters of a
    /// [`ParamSet`] in order.
    pub fn bind(graph: Graph, vars: Vec<Var>) -> Self {
        Self { graph, vars }
    }

    #[inline]
    pub fn var(&self, p: Param) -> Var {
        self.vars[p.0]
    }

    pub fn conv(&mut self, p: &ConvParams, x: Var) -> Result<Var> {
        let (w, b) = (self.var(p.w), self.var(p.b));
        self.graph.conv2d(x, w, b, p.stride, p.pad)
    }

    pub fn conv_relu(&mut self, p: &ConvParams, x: Var) -> Result<Var> {
        let y = self.conv(p, x)?;
        Ok(self.graph.relu(y))
    }

    pub fn linear(&mut self, p: &LinearParams, x: Var) -> Result<Var> {
        let (w, b) = (self.var(p.w), self.var(p.b));
        self.graph.linear(x, w, b)
    }

    /// Parameter gradients in [`ParamSet`] order; untouched parameters get
    /// zeros.
    pub fn param_grads(&self, grads: &mut Grads) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.graph.value(v).shape()))
            })
            .collect()
    }
}
