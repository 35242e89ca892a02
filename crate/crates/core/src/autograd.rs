//! Reverse-mode automatic differentiation with higher-order support.
//!
//! Every backward rule is written in terms of [`Var`] operations, so when a
//! gradient is requested with `create_graph = true` the gradient itself is a
//! differentiable expression. That is what the gradient penalty needs: the
//! norm of an input gradient is differentiated again with respect to the
//! critic parameters.
//!
//! Convolutions close under differentiation through three bilinear
//! primitives (forward, input-adjoint, weight-adjoint); each one's partial
//! derivatives are again one of the three.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

fn set_grad_mode(enabled: bool) -> GradModeGuard {
    GradModeGuard(GRAD_ENABLED.with(|g| g.replace(enabled)))
}

/// Runs `f` without recording operations on the tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = set_grad_mode(false);
    f()
}

#[derive(Debug, Clone)]
enum Op {
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f32),
    AddScalar,
    Pow(f32),
    Exp,
    Ln,
    Softplus,
    Sigmoid,
    Leaky(f32),
    /// inputs: [upstream, x]; multiplies by the leaky-relu slope mask of x
    LeakyGrad(f32),
    /// clamp to [lo, hi] with a straight-through gradient
    ClampSt,
    Reshape(Vec<usize>),
    BroadcastTo(Vec<usize>),
    SumTo(Vec<usize>),
    Narrow { axis: usize, start: usize, total: usize },
    PadNarrow { axis: usize, start: usize, len: usize },
    Concat { axis: usize, sizes: Vec<usize> },
    MatMul,
    Transpose,
    Conv,
    ConvInputGrad,
    ConvWeightGrad,
    Upsample,
    Downsample,
}

struct Node {
    id: u64,
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<(Op, Vec<Var>)>,
}

/// A tensor on the autodiff tape.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl Var {
    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            grad_fn: None,
        }))
    }

    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            grad_fn: None,
        }))
    }

    fn from_op(value: Tensor, op: Op, inputs: Vec<Var>) -> Var {
        let track = is_grad_enabled() && inputs.iter().any(|v| v.0.requires_grad);
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: track,
            grad_fn: track.then_some((op, inputs)),
        }))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f32 {
        self.0.value.item()
    }

    // elementwise

    pub fn add(&self, rhs: &Var) -> Var {
        Var::from_op(self.value().add(rhs.value()), Op::Add, vec![self.clone(), rhs.clone()])
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        Var::from_op(self.value().sub(rhs.value()), Op::Sub, vec![self.clone(), rhs.clone()])
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        Var::from_op(self.value().mul(rhs.value()), Op::Mul, vec![self.clone(), rhs.clone()])
    }

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().scale(-1.0), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, k: f32) -> Var {
        Var::from_op(self.value().scale(k), Op::Scale(k), vec![self.clone()])
    }

    pub fn add_scalar(&self, k: f32) -> Var {
        Var::from_op(self.value().map(|v| v + k), Op::AddScalar, vec![self.clone()])
    }

    pub fn powf(&self, p: f32) -> Var {
        Var::from_op(self.value().map(|v| v.powf(p)), Op::Pow(p), vec![self.clone()])
    }

    pub fn sqrt(&self) -> Var {
        self.powf(0.5)
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().map(f32::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Var {
        Var::from_op(self.value().map(f32::ln), Op::Ln, vec![self.clone()])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var {
        Var::from_op(self.value().map(softplus), Op::Softplus, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(self.value().map(sigmoid), Op::Sigmoid, vec![self.clone()])
    }

    pub fn leaky_relu(&self, slope: f32) -> Var {
        Var::from_op(
            self.value().map(|v| if v > 0.0 { v } else { v * slope }),
            Op::Leaky(slope),
            vec![self.clone()],
        )
    }

    fn leaky_grad(upstream: &Var, x: &Var, slope: f32) -> Var {
        Var::from_op(
            upstream
                .value()
                .zip_map(x.value(), |g, v| if v > 0.0 { g } else { g * slope }),
            Op::LeakyGrad(slope),
            vec![upstream.clone(), x.clone()],
        )
    }

    /// Clamps into `[0, 1]` on the forward pass; the backward pass treats
    /// the clamp as identity so an unconstrained parameter behind it keeps
    /// receiving gradient at the boundary.
    pub fn clamp_unit_straight_through(&self) -> Var {
        Var::from_op(self.value().map(|v| v.clamp(0.0, 1.0)), Op::ClampSt, vec![self.clone()])
    }

    // shape

    pub fn reshape(&self, shape: &[usize]) -> Var {
        Var::from_op(
            self.value().reshape(shape),
            Op::Reshape(self.shape().to_vec()),
            vec![self.clone()],
        )
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op(
            self.value().broadcast_to(shape),
            Op::BroadcastTo(self.shape().to_vec()),
            vec![self.clone()],
        )
    }

    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        Var::from_op(
            self.value().sum_to(shape),
            Op::SumTo(self.shape().to_vec()),
            vec![self.clone()],
        )
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&self) -> Var {
        self.sum_to(&[1])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f32;
        self.sum().scale(1.0 / n)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        Var::from_op(
            self.value().narrow(axis, start, len),
            Op::Narrow {
                axis,
                start,
                total: self.shape()[axis],
            },
            vec![self.clone()],
        )
    }

    fn pad_narrow(&self, axis: usize, start: usize, total: usize) -> Var {
        Var::from_op(
            self.value().pad_narrow(axis, start, total),
            Op::PadNarrow {
                axis,
                start,
                len: self.shape()[axis],
            },
            vec![self.clone()],
        )
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        Var::from_op(
            Tensor::concat(&values, axis),
            Op::Concat {
                axis,
                sizes: parts.iter().map(|p| p.shape()[axis]).collect(),
            },
            parts.to_vec(),
        )
    }

    // linear algebra

    pub fn matmul(&self, rhs: &Var) -> Var {
        Var::from_op(
            self.value().matmul(rhs.value()),
            Op::MatMul,
            vec![self.clone(), rhs.clone()],
        )
    }

    pub fn transpose(&self) -> Var {
        Var::from_op(self.value().transpose2(), Op::Transpose, vec![self.clone()])
    }

    /// Stride-1 same-padded convolution; `weight` is `[Co, Ci, k, k]`.
    pub fn conv2d(&self, weight: &Var) -> Var {
        Var::from_op(
            self.value().conv2d(weight.value()),
            Op::Conv,
            vec![self.clone(), weight.clone()],
        )
    }

    fn conv2d_input_grad(upstream: &Var, weight: &Var) -> Var {
        Var::from_op(
            upstream.value().conv2d_input_grad(weight.value()),
            Op::ConvInputGrad,
            vec![upstream.clone(), weight.clone()],
        )
    }

    fn conv2d_weight_grad(input: &Var, upstream: &Var, k: usize) -> Var {
        Var::from_op(
            upstream.value().conv2d_weight_grad(input.value(), k),
            Op::ConvWeightGrad,
            vec![input.clone(), upstream.clone()],
        )
    }

    pub fn upsample2x(&self) -> Var {
        Var::from_op(self.value().upsample2x(), Op::Upsample, vec![self.clone()])
    }

    pub fn downsample2x(&self) -> Var {
        Var::from_op(self.value().downsample2x(), Op::Downsample, vec![self.clone()])
    }
}

pub(crate) fn softplus(v: f32) -> f32 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Backward rule for one node: gradients for each input whose `needed`
/// flag is set.
fn backward_rule(op: &Op, inputs: &[Var], out: &Var, g: &Var, needed: &[bool]) -> Vec<Option<Var>> {
    let want = |i: usize| needed[i];
    let mut grads: Vec<Option<Var>> = vec![None; inputs.len()];
    match op {
        Op::Add => {
            grads[0] = want(0).then(|| g.clone());
            grads[1] = want(1).then(|| g.clone());
        }
        Op::Sub => {
            grads[0] = want(0).then(|| g.clone());
            grads[1] = want(1).then(|| g.neg());
        }
        Op::Mul => {
            grads[0] = want(0).then(|| g.mul(&inputs[1]));
            grads[1] = want(1).then(|| g.mul(&inputs[0]));
        }
        Op::Neg => grads[0] = Some(g.neg()),
        Op::Scale(k) => grads[0] = Some(g.scale(*k)),
        Op::AddScalar => grads[0] = Some(g.clone()),
        Op::Pow(p) => {
            let d = if *p == 1.0 {
                g.clone()
            } else if *p == 2.0 {
                g.mul(&inputs[0]).scale(2.0)
            } else {
                g.mul(&inputs[0].powf(p - 1.0)).scale(*p)
            };
            grads[0] = Some(d);
        }
        Op::Exp => grads[0] = Some(g.mul(out)),
        Op::Ln => grads[0] = Some(g.mul(&inputs[0].powf(-1.0))),
        Op::Softplus => grads[0] = Some(g.mul(&inputs[0].sigmoid())),
        Op::Sigmoid => {
            let one_minus = out.neg().add_scalar(1.0);
            grads[0] = Some(g.mul(&out.mul(&one_minus)));
        }
        Op::Leaky(slope) => grads[0] = Some(Var::leaky_grad(g, &inputs[0], *slope)),
        Op::LeakyGrad(slope) => {
            // the mask is piecewise constant in x, so only the upstream path carries gradient
            grads[0] = want(0).then(|| Var::leaky_grad(g, &inputs[1], *slope));
        }
        Op::ClampSt => grads[0] = Some(g.clone()),
        Op::Reshape(shape) => grads[0] = Some(g.reshape(shape)),
        Op::BroadcastTo(shape) => grads[0] = Some(g.sum_to(shape)),
        Op::SumTo(shape) => grads[0] = Some(g.broadcast_to(shape)),
        Op::Narrow { axis, start, total } => grads[0] = Some(g.pad_narrow(*axis, *start, *total)),
        Op::PadNarrow { axis, start, len } => grads[0] = Some(g.narrow(*axis, *start, *len)),
        Op::Concat { axis, sizes } => {
            let mut offset = 0;
            for (i, &len) in sizes.iter().enumerate() {
                if want(i) {
                    grads[i] = Some(g.narrow(*axis, offset, len));
                }
                offset += len;
            }
        }
        Op::MatMul => {
            grads[0] = want(0).then(|| g.matmul(&inputs[1].transpose()));
            grads[1] = want(1).then(|| inputs[0].transpose().matmul(g));
        }
        Op::Transpose => grads[0] = Some(g.transpose()),
        Op::Conv => {
            let k = inputs[1].shape()[2];
            grads[0] = want(0).then(|| Var::conv2d_input_grad(g, &inputs[1]));
            grads[1] = want(1).then(|| Var::conv2d_weight_grad(&inputs[0], g, k));
        }
        Op::ConvInputGrad => {
            // forward: x_grad = adjoint_conv(upstream, w)
            let k = inputs[1].shape()[2];
            grads[0] = want(0).then(|| g.conv2d(&inputs[1]));
            grads[1] = want(1).then(|| Var::conv2d_weight_grad(g, &inputs[0], k));
        }
        Op::ConvWeightGrad => {
            // forward: w_grad = corr(upstream, x); inputs are [x, upstream]
            grads[0] = want(0).then(|| Var::conv2d_input_grad(&inputs[1], g));
            grads[1] = want(1).then(|| inputs[0].conv2d(g));
        }
        Op::Upsample => grads[0] = Some(g.downsample2x().scale(4.0)),
        Op::Downsample => grads[0] = Some(g.upsample2x().scale(0.25)),
    }
    for (i, grad) in grads.iter_mut().enumerate() {
        if !needed[i] {
            *grad = None;
        }
    }
    grads
}

/// Gradients of the scalar `root` with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are themselves on the tape and
/// can be differentiated again. Inputs the root does not depend on get
/// `None`.
pub fn grad(root: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Option<Var>> {
    assert_eq!(root.value().numel(), 1, "grad() needs a scalar root");
    let _guard = set_grad_mode(create_graph);

    // iterative post-order DFS: inputs appear before the nodes that use them
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    if root.requires_grad() {
        let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some((_, inputs)) = &node.0.grad_fn {
                for input in inputs {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
    }

    let targets: HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let mut needed: HashSet<u64> = HashSet::new();
    for node in &order {
        let hit = targets.contains(&node.id())
            || node
                .0
                .grad_fn
                .as_ref()
                .is_some_and(|(_, inputs)| inputs.iter().any(|i| needed.contains(&i.id())));
        if hit {
            needed.insert(node.id());
        }
    }

    let mut grads: HashMap<u64, Var> = HashMap::new();
    if needed.contains(&root.id()) {
        grads.insert(root.id(), Var::constant(Tensor::ones(root.shape())));
    }
    for node in order.iter().rev() {
        let Some((op, inputs)) = &node.0.grad_fn else {
            continue;
        };
        let g = if targets.contains(&node.id()) {
            grads.get(&node.id()).cloned()
        } else {
            grads.remove(&node.id())
        };
        let Some(g) = g else { continue };
        let mask: Vec<bool> = inputs.iter().map(|i| needed.contains(&i.id())).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let input_grads = backward_rule(op, inputs, node, &g, &mask);
        for (input, ig) in inputs.iter().zip(input_grads) {
            if let Some(ig) = ig {
                let acc = match grads.remove(&input.id()) {
                    Some(prev) => prev.add(&ig),
                    None => ig,
                };
                grads.insert(input.id(), acc);
            }
        }
    }
    wrt.iter().map(|v| grads.get(&v.id()).cloned()).collect()
}
