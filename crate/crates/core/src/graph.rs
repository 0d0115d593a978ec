//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the record in reverse and
//! calls the analytic backward kernel of each op.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Result};
use crate::kernels::{self, Activation, SpatialMap};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    Act { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Resize { x: Var },
    ScaleChannels { x: Var, s: Var },
    AddChannels { x: Var, v: Var },
    SpatialAttend { x: Var, weights: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Reshape { x: Var },
    Spatial { x: Var, map: Arc<SpatialMap> },
    PlanePool { x: Var, planes: Arc<Vec<Vec<f64>>>, assign: Arc<Vec<usize>> },
    MeanPool { x: Var },
    Combine { terms: Vec<(Var, f64)> },
    Dot { x: Var, c: Tensor },
    SmoothL1 { pred: Var, target: Tensor },
    CrossEntropy { logits: Var, label: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    /// Sign pattern (`x > 0`) of every relu input on the tape, in tape order.
    pub fn relu_signs(&self) -> Vec<bool> {
        let mut signs = Vec::new();
        for n in &self.nodes {
            if let Op::Act {
                x,
                kind: Activation::Relu,
            } = n.op
            {
                signs.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        signs
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let y = kernels::activation_forward(kind, self.value(x));
        self.push(y, Op::Act { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.activation(Activation::Softmax, x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = kernels::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Resize { x }, &[x]))
    }

    /// `y[c] = s[c] * x[c]` for `x: [C, H, W]`, `s: [C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("scale_channels")?;
        check_dim("scale_channels", "weight length", c, self.value(s).len())?;
        let sv = self.value(s).data();
        let mut y = self.value(x).clone();
        for (ch, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
            for v in plane {
                *v *= sv[ch];
            }
        }
        Ok(self.push(y, Op::ScaleChannels { x, s }, &[x, s]))
    }

    /// `y[c] = x[c] + v[c]` broadcast over the spatial grid.
    pub fn add_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("add_channels")?;
        check_dim("add_channels", "vector length", c, self.value(v).len())?;
        let vv = self.value(v).data();
        let mut y = self.value(x).clone();
        for (ch, plane) in y.data_mut().chunks_mut(h * w).enumerate() {
            for p in plane {
                *p += vv[ch];
            }
        }
        Ok(self.push(y, Op::AddChannels { x, v }, &[x, v]))
    }

    /// `y[c] = sum_p weights[p] * x[c, p]` over flattened spatial positions.
    pub fn spatial_attend(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("spatial_attend")?;
        check_dim("spatial_attend", "weight length", h * w, self.value(weights).len())?;
        let wt = self.value(weights).data();
        let xv = self.value(x);
        let y = (0..c)
            .map(|ch| xv.plane(ch).iter().zip(wt).map(|(a, b)| a * b).sum())
            .collect();
        let y = Tensor::new(&[c], y)?;
        Ok(self.push(y, Op::SpatialAttend { x, weights }, &[x, weights]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let y = kernels::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, &[n])
    }

    pub fn spatial_map(&mut self, x: Var, map: Arc<SpatialMap>) -> Result<Var> {
        let y = map.apply(self.value(x))?;
        Ok(self.push(y, Op::Spatial { x, map }, &[x]))
    }

    /// `y[c] = sum_{h,w} x[c,h,w] * planes[assign[c]][h,w]`.
    pub fn plane_pool(
        &mut self,
        x: Var,
        planes: Arc<Vec<Vec<f64>>>,
        assign: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("plane_pool")?;
        check_dim("plane_pool", "channel assignment length", c, assign.len())?;
        let mut y = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = planes
                .get(assign[ch])
                .ok_or_else(|| invalid("plane_pool", "assignment out of range"))?;
            check_dim("plane_pool", "plane size", h * w, plane.len())?;
            y.push(self.value(x).plane(ch).iter().zip(plane).map(|(a, b)| a * b).sum());
        }
        let y = Tensor::new(&[c], y)?;
        Ok(self.push(y, Op::PlanePool { x, planes, assign }, &[x]))
    }

    /// Global average pooling `[C, H, W] -> [C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3("mean_pool")?;
        let n = (h * w) as f64;
        let xv = self.value(x);
        let y = (0..c).map(|ch| xv.plane(ch).iter().sum::<f64>() / n).collect();
        let y = Tensor::new(&[c], y)?;
        Ok(self.push(y, Op::MeanPool { x }, &[x]))
    }

    /// `sum_i k_i * x_i` over same-shaped inputs.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (&(first, _), _) = terms
            .split_first()
            .ok_or_else(|| invalid("combine", "no terms"))?;
        let mut y = Tensor::zeros(self.value(first).shape());
        for &(v, k) in terms {
            y.axpy(k, self.value(v))?;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(y, Op::Combine { terms: terms.to_vec() }, &inputs))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.combine(&[(x, k)])
    }

    /// Scalar `sum(x * c)` against a constant tensor.
    pub fn dot_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        self.value(x).same_shape("dot_const", &c)?;
        let y = self.value(x).data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(y), Op::Dot { x, c }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let c = Tensor::ones(self.value(x).shape());
        self.dot_const(x, c)
    }

    pub fn smooth_l1(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let y = kernels::smooth_l1(self.value(pred), &target)?;
        Ok(self.push(Tensor::scalar(y), Op::SmoothL1 { pred, target }, &[pred]))
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let y = kernels::cross_entropy(self.value(logits), label)?;
        Ok(self.push(Tensor::scalar(y), Op::CrossEntropy { logits, label }, &[logits]))
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let mut slots: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        slots[root.0] = Some(Tensor::ones(self.value(root).shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = slots[i].take() else { continue };
            self.backward_node(node, &gy, &mut slots)?;
            slots[i] = Some(gy);
        }
        Ok(Grads { slots })
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, slots: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, g: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut slots[v.0] {
                Some(t) => t.axpy(1.0, &g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    self.value(b),
                    stride,
                    pad,
                    gy,
                )?;
                acc(x, gx)?;
                acc(w, gw)?;
                acc(b, gb)?;
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) =
                    kernels::linear_backward(self.value(x), self.value(w), self.value(b), gy)?;
                acc(x, gx)?;
                acc(w, gw)?;
                acc(b, gb)?;
            }
            Op::Act { x, kind } => {
                let gx = kernels::activation_backward(kind, self.value(x), &node.value, gy)?;
                acc(x, gx)?;
            }
            Op::Add { a, b } => {
                acc(a, gy.clone())?;
                acc(b, gy.clone())?;
            }
            Op::Resize { x } => {
                let (_, h, w) = self.value(x).dims3("resize")?;
                acc(x, kernels::bilinear_resize_backward(gy, h, w)?)?;
            }
            Op::ScaleChannels { x, s } => {
                let xv = self.value(x);
                let (c, h, w) = xv.dims3("scale_channels")?;
                let sv = self.value(s).data();
                let mut gx = gy.clone();
                let mut gs = Vec::with_capacity(c);
                for (ch, &k) in sv.iter().enumerate().take(c) {
                    let n = h * w;
                    let g = &mut gx.data_mut()[ch * n..(ch + 1) * n];
                    gs.push(g.iter().zip(xv.plane(ch)).map(|(a, b)| a * b).sum());
                    for v in g.iter_mut() {
                        *v *= k;
                    }
                }
                acc(x, gx)?;
                acc(s, Tensor::new(self.value(s).shape(), gs)?)?;
            }
            Op::AddChannels { x, v } => {
                let (c, h, w) = gy.dims3("add_channels")?;
                let gv = (0..c).map(|ch| gy.data()[ch * h * w..(ch + 1) * h * w].iter().sum()).collect();
                acc(x, gy.clone())?;
                acc(v, Tensor::new(self.value(v).shape(), gv)?)?;
            }
            Op::SpatialAttend { x, weights } => {
                let xv = self.value(x);
                let (c, h, w) = xv.dims3("spatial_attend")?;
                let wt = self.value(weights).data();
                let g = gy.data();
                let n = h * w;
                let mut gx = vec![0.0; c * n];
                let mut gw = vec![0.0; n];
                for ch in 0..c {
                    let xp = xv.plane(ch);
                    for p in 0..n {
                        gx[ch * n + p] = g[ch] * wt[p];
                        gw[p] += g[ch] * xp[p];
                    }
                }
                acc(x, Tensor::new(xv.shape(), gx)?)?;
                acc(weights, Tensor::new(self.value(weights).shape(), gw)?)?;
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (gx, gg, gb) =
                    kernels::layer_norm_backward(self.value(x), self.value(gamma), eps, gy)?;
                acc(x, gx)?;
                acc(gamma, gg)?;
                acc(beta, gb)?;
            }
            Op::Reshape { x } => {
                acc(x, gy.reshape(self.value(x).shape())?)?;
            }
            Op::Spatial { x, ref map } => {
                acc(x, map.apply_transpose(gy)?)?;
            }
            Op::PlanePool {
                x,
                ref planes,
                ref assign,
            } => {
                let (c, h, w) = self.value(x).dims3("plane_pool")?;
                let mut gx = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    let g = gy.data()[ch];
                    gx.extend(planes[assign[ch]].iter().map(|b| g * b));
                }
                acc(x, Tensor::new(&[c, h, w], gx)?)?;
            }
            Op::MeanPool { x } => {
                let (c, h, w) = self.value(x).dims3("mean_pool")?;
                let n = (h * w) as f64;
                let mut gx = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    let g = gy.data()[ch] / n;
                    gx.extend(core::iter::repeat_n(g, h * w));
                }
                acc(x, Tensor::new(&[c, h, w], gx)?)?;
            }
            Op::Combine { ref terms } => {
                for &(v, k) in terms {
                    acc(v, gy.scale(k))?;
                }
            }
            Op::Dot { x, ref c } => {
                acc(x, c.scale(gy.item()))?;
            }
            Op::SmoothL1 { pred, ref target } => {
                let g = kernels::smooth_l1_grad(self.value(pred), target)?;
                acc(pred, g.scale(gy.item()))?;
            }
            Op::CrossEntropy { logits, label } => {
                let g = kernels::cross_entropy_grad(self.value(logits), label)?;
                acc(logits, g.scale(gy.item()))?;
            }
        }
        Ok(())
    }
}
