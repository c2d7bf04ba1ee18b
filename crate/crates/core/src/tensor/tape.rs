use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::raw::{self, PaddingMode};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Square,
    Sigmoid,
    Gelu,
    LeakyRelu(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Unary(usize, Unary),
    Sum(usize),
    SumAxes {
        input: usize,
        axes: Vec<usize>,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        groups: usize,
    },
    Conv2dAdjoint {
        x: usize,
        w: usize,
        stride: usize,
        groups: usize,
    },
    Pad {
        input: usize,
        pads: [usize; 4],
        mode: PaddingMode,
    },
    Decimate(usize, usize),
    Softmax(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse. One tape per forward pass; tapes are not `Sync`.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of every `requires_grad` leaf after a backward pass.
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.by_id.remove(&var.id)
    }
}

impl Tape {
    /// Every recorded value is checked for NaN/inf; see [`Tape::with_finite_check`].
    pub fn new() -> Self {
        Self::with_finite_check(true)
    }

    pub fn with_finite_check(check_finite: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, name: &str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar root. Leaves created with
    /// `requires_grad` receive their accumulated gradient (zeros if the root
    /// does not depend on them). The tape cannot be differentiated twice.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if !root_value.shape().is_empty() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::scalar(1.0));
        let mut by_id = HashMap::new();
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                if matches!(node.op, Op::Leaf) {
                    by_id.insert(id, Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                by_id.insert(id, g);
                continue;
            }
            for (input, contribution) in backward_rule(&nodes, id, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.axpy(1.0, &contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        // Leaves recorded after the root cannot depend on it either.
        for (id, node) in nodes.iter().enumerate().skip(root.id + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                by_id.insert(id, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { by_id })
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn apply_unary(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Sqrt => x.sqrt(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Sigmoid => sigmoid(x),
        Unary::Gelu => gelu(x),
        Unary::LeakyRelu(slope) => {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        }
        Unary::Scale(c) => c * x,
        Unary::AddScalar(c) => x + c,
    }
}

/// d(out)/d(in) given the input `x` and output `y`.
fn unary_derivative(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Neg => -1.0,
        Unary::Exp => y,
        Unary::Ln => 1.0 / x,
        Unary::Sqrt => 0.5 / y,
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Gelu => gelu_grad(x),
        Unary::LeakyRelu(slope) => {
            if x > 0.0 {
                1.0
            } else {
                slope
            }
        }
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
    }
}

fn backward_rule(nodes: &[Node], id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let out = &nodes[id].value;
    let need = |i: usize| nodes[i].requires_grad;
    // Contribution for input `i`, computed only if `i` tracks gradients.
    let mut res: Vec<(usize, Tensor)> = Vec::with_capacity(2);
    let mut push = |i: usize, f: &dyn Fn() -> Result<Tensor>| -> Result<()> {
        if need(i) {
            res.push((i, f()?));
        }
        Ok(())
    };
    Ok(match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => {
            push(*a, &|| Ok(raw::sum_to_shape(g, val(*a).shape())))?;
            push(*b, &|| Ok(raw::sum_to_shape(g, val(*b).shape())))?;
            res
        }
        Op::Sub(a, b) => {
            push(*a, &|| Ok(raw::sum_to_shape(g, val(*a).shape())))?;
            push(*b, &|| Ok(raw::sum_to_shape(g, val(*b).shape()).scale(-1.0)))?;
            res
        }
        Op::Mul(a, b) => {
            push(*a, &|| {
                let ga = raw::broadcast_binary(g, val(*b), |gv, bv| gv * bv)?;
                Ok(raw::sum_to_shape(&ga, val(*a).shape()))
            })?;
            push(*b, &|| {
                let gb = raw::broadcast_binary(g, val(*a), |gv, av| gv * av)?;
                Ok(raw::sum_to_shape(&gb, val(*b).shape()))
            })?;
            res
        }
        Op::Div(a, b) => {
            push(*a, &|| {
                let ga = raw::broadcast_binary(g, val(*b), |gv, bv| gv / bv)?;
                Ok(raw::sum_to_shape(&ga, val(*a).shape()))
            })?;
            // d(a/b)/db = -out/b
            push(*b, &|| {
                let q = raw::broadcast_binary(out, val(*b), |o, bv| -o / bv)?;
                Ok(raw::sum_to_shape(&g.mul(&q)?, val(*b).shape()))
            })?;
            res
        }
        Op::Unary(a, u) => {
            let x = val(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(out.data())
                .map(|((&gv, &xv), &yv)| gv * unary_derivative(*u, xv, yv))
                .collect();
            vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
        Op::SumAxes { input, axes, .. } => {
            let in_shape = val(*input).shape();
            let kept = raw::reduced_shape(in_shape, axes);
            let g = g.reshape(&kept)?;
            vec![(*input, raw::broadcast_to(&g, in_shape))]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
        Op::Permute(a, perm) => vec![(*a, raw::permute(g, &raw::inverse_permutation(perm))?)],
        Op::Concat { inputs, axis } => {
            let mut start = 0;
            for &i in inputs {
                let len = val(i).shape()[*axis];
                push(i, &|| raw::slice_axis(g, *axis, start, len))?;
                start += len;
            }
            res
        }
        Op::Slice { input, axis, start } => {
            vec![(*input, raw::unslice_axis(g, val(*input).shape(), *axis, *start))]
        }
        Op::MatMul(a, b) => {
            push(*a, &|| Ok(raw::sum_to_shape(&raw::matmul(g, val(*b), false, true)?, val(*a).shape())))?;
            push(*b, &|| Ok(raw::sum_to_shape(&raw::matmul(val(*a), g, true, false)?, val(*b).shape())))?;
            res
        }
        Op::Conv2d {
            x,
            w,
            stride,
            groups,
        } => {
            let (xv, wv) = (val(*x), val(*w));
            let in_hw = (xv.shape()[2], xv.shape()[3]);
            let k_hw = (wv.shape()[2], wv.shape()[3]);
            push(*x, &|| raw::conv2d_input_grad(g, wv, *stride, *groups, in_hw))?;
            push(*w, &|| raw::conv2d_weight_grad(xv, g, *stride, *groups, k_hw))?;
            res
        }
        Op::Conv2dAdjoint {
            x,
            w,
            stride,
            groups,
        } => {
            let wv = val(*w);
            let k_hw = (wv.shape()[2], wv.shape()[3]);
            push(*x, &|| raw::conv2d_forward(g, wv, *stride, *groups))?;
            push(*w, &|| raw::conv2d_weight_grad(g, val(*x), *stride, *groups, k_hw))?;
            res
        }
        Op::Pad { input, pads, mode } => {
            let s = val(*input).shape();
            let r = s.len();
            vec![(*input, raw::pad2d_adjoint(g, (s[r - 2], s[r - 1]), *pads, *mode))]
        }
        Op::Decimate(a, s) => vec![(*a, raw::zero_insert(g, *s))],
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap_or(&1);
            let mut data = Vec::with_capacity(out.numel());
            for (gr, yr) in g.data().chunks(n).zip(out.data().chunks(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                data.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
            }
            vec![(*a, Tensor::from_parts(out.shape().to_vec(), data))]
        }
    })
}

/// Elementwise operations exposed through [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Sqrt,
    LeakyRelu,
    Gelu,
    Sigmoid,
}

/// Dispatches a binary (`b` required) or unary (`b` ignored) elementwise op.
/// LeakyReLU uses slope 0.2.
pub fn elementwise<'t>(op: ElementwiseOp, a: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let need = || b.ok_or_else(|| Error::invalid(format!("{op:?} needs two operands")));
    match op {
        ElementwiseOp::Add => a.add(need()?),
        ElementwiseOp::Sub => a.sub(need()?),
        ElementwiseOp::Mul => a.mul(need()?),
        ElementwiseOp::Div => a.div(need()?),
        ElementwiseOp::Exp => a.exp(),
        ElementwiseOp::Sqrt => a.sqrt(),
        ElementwiseOp::LeakyRelu => a.leaky_relu(0.2),
        ElementwiseOp::Gelu => a.gelu(),
        ElementwiseOp::Sigmoid => a.sigmoid(),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = raw::broadcast_binary(&self.value(), &other.value(), f)?;
        self.tape.record(name, value, op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    fn unary(self, u: Unary, name: &str) -> Result<Var<'t>> {
        let value = self.value().map(|x| apply_unary(u, x));
        self.tape.record(name, value, Op::Unary(self.id, u), &[self.id])
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Unary::Neg, "neg")
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp, "exp")
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(Unary::Ln, "ln")
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Unary::Sqrt, "sqrt")
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(Unary::Abs, "abs")
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Unary::Square, "square")
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid, "sigmoid")
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary(Unary::Gelu, "gelu")
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t>> {
        self.unary(Unary::LeakyRelu(slope), "leaky_relu")
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Unary::Scale(c), "scale")
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Unary::AddScalar(c), "add_scalar")
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.record("sum", v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = axes.iter().find(|&&a| a >= x.rank()) {
            return Err(Error::invalid(format!("axis {bad} out of range for {:?}", x.shape())));
        }
        let mut v = raw::sum_axes_keepdim(&x, axes);
        if !keepdim {
            let shape: Vec<usize> = x
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            v = v.reshape(&shape)?;
        }
        let op = Op::SumAxes {
            input: self.id,
            axes: axes.to_vec(),
        };
        self.tape.record("sum_axes", v, op, &[self.id])
    }

    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        self.sum_axes(axes, keepdim)?.scale(1.0 / count as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.tape.record("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let v = raw::permute(&self.value(), perm)?;
        self.tape
            .record("permute", v, Op::Permute(self.id, perm.to_vec()), &[self.id])
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = raw::slice_axis(&self.value(), axis, start, len)?;
        let op = Op::Slice {
            input: self.id,
            axis,
            start,
        };
        self.tape.record("slice", v, op, &[self.id])
    }

    /// Splits `axis` into `parts` equal chunks.
    pub fn chunk(self, parts: usize, axis: usize) -> Result<Vec<Var<'t>>> {
        let ext = self.shape()[axis];
        if parts == 0 || ext % parts != 0 {
            return Err(Error::shape(format!("cannot split extent {ext} into {parts} chunks")));
        }
        let len = ext / parts;
        (0..parts).map(|i| self.slice(axis, i * len, len)).collect()
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        for p in parts {
            first.same_tape(p);
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = raw::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat {
            inputs: ids.clone(),
            axis,
        };
        first.tape.record("concat", v, op, &ids)
    }

    /// Batched matrix product over the last two axes; batch axes broadcast.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let v = raw::matmul(&self.value(), &other.value(), false, false)?;
        self.tape
            .record("matmul", v, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn pad2d(self, pads: [usize; 4], mode: PaddingMode) -> Result<Var<'t>> {
        if pads == [0; 4] {
            return Ok(self);
        }
        let v = raw::pad2d(&self.value(), pads, mode)?;
        let op = Op::Pad {
            input: self.id,
            pads,
            mode,
        };
        self.tape.record("pad2d", v, op, &[self.id])
    }

    /// 2-D cross-correlation of `self [b,c,h,w]` with `w [o,c/g,kh,kw]`,
    /// padding every side by `padding` pixels in `mode`.
    pub fn conv2d(
        self,
        w: Var<'t>,
        stride: usize,
        padding: usize,
        mode: PaddingMode,
        groups: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&w);
        let x = self.pad2d([padding; 4], mode)?;
        let v = raw::conv2d_forward(&x.value(), &w.value(), stride, groups)?;
        let op = Op::Conv2d {
            x: x.id,
            w: w.id,
            stride,
            groups,
        };
        self.tape.record("conv2d", v, op, &[x.id, w.id])
    }

    /// Transposed convolution: the adjoint of a zero-padded
    /// `conv2d(·, w, stride, padding)` whose input had extents `out_hw`.
    pub fn conv_transpose2d(
        self,
        w: Var<'t>,
        stride: usize,
        padding: usize,
        groups: usize,
        out_hw: (usize, usize),
    ) -> Result<Var<'t>> {
        self.same_tape(&w);
        let padded = (out_hw.0 + 2 * padding, out_hw.1 + 2 * padding);
        let v = raw::conv2d_input_grad(&self.value(), &w.value(), stride, groups, padded)?;
        let op = Op::Conv2dAdjoint {
            x: self.id,
            w: w.id,
            stride,
            groups,
        };
        let full = self.tape.record("conv_transpose2d", v, op, &[self.id, w.id])?;
        if padding == 0 {
            return Ok(full);
        }
        full.slice(2, padding, out_hw.0)?.slice(3, padding, out_hw.1)
    }

    /// Keeps pixel (0,0) of every `s x s` block.
    pub fn decimate(self, s: usize) -> Result<Var<'t>> {
        if s == 1 {
            return Ok(self);
        }
        let v = raw::decimate(&self.value(), s)?;
        self.tape.record("decimate", v, Op::Decimate(self.id, s), &[self.id])
    }

    pub fn softmax_last(self) -> Result<Var<'t>> {
        let v = raw::softmax_last(&self.value())?;
        self.tape.record("softmax", v, Op::Softmax(self.id), &[self.id])
    }

    /// Broadcast-multiply by a constant tensor.
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'t>> {
        let k = self.tape.constant(c.clone());
        self.mul(k)
    }

    pub fn add_const(self, c: &Tensor) -> Result<Var<'t>> {
        let k = self.tape.constant(c.clone());
        self.add(k)
    }
}
