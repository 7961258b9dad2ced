//! Reverse-mode automatic differentiation tape.
//!
//! A [`Tape`] records one forward pass as an arena of nodes in construction
//! order, which is already a topological order. [`Var`] is a copyable handle
//! into the arena; operations on it compute the result eagerly, record a
//! node, and propagate the `requires_grad` flag. [`Tape::backward`] walks
//! the arena once in reverse and returns a gradient per live node, then
//! clears the tape for the next step.
//!
//! Every forward operation validates shapes and checks its output for
//! non-finite values, so overflow surfaces as an error instead of a silent
//! infinity.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};

use super::ops::{self, BatchNormSaved};
use super::{broadcast_shapes, special, Tensor};

/// Differentiable node with saved context for the backward pass.
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;
    /// Gradients with respect to each input, given the output gradient.
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor)
        -> Vec<Option<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    Relu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Lgamma(usize),
    Digamma(usize),
    Square(usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    MeanAxis(usize, usize),
    BroadcastTo(usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    LogSumExpRows(usize),
    BatchNormTrain { x: usize, gamma: usize, beta: usize, saved: Box<BatchNormSaved> },
    BatchNormInfer { x: usize, gamma: usize, beta: usize, norm: Tensor, scale: Tensor },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Operation recorder for one forward/backward cycle.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    generation: Cell<u64>,
    kink_hit: Cell<bool>,
}

/// Handle to a tape node. Cheap to copy; invalidated when the tape clears.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    gen: u64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("gen", &self.gen).finish()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    gen: u64,
    /// True when the root did not depend on any differentiable leaf.
    pub detached: bool,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        if v.gen != self.gen {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        if v.gen != self.gen {
            return None;
        }
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            generation: Cell::new(0),
            kink_hit: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when a forward op evaluated an activation at a non-differentiable
    /// point (relu at zero, clamp at a boundary) since the last clear.
    pub fn kink_hit(&self) -> bool {
        self.kink_hit.get()
    }

    /// Register an input tensor. Gradients are collected for it when
    /// `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_unchecked(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, false, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_unchecked(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id,
            gen: self.generation.get(),
        }
    }

    fn push(&self, op_name: &'static str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {op_name} (shape {:?})",
                value.shape()
            )));
        }
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    fn check_gen(&self, v: Var<'_>) -> Result<()> {
        if v.gen != self.generation.get() {
            return Err(Error::shape(
                "tape",
                "variable refers to a cleared tape generation".to_string(),
            ));
        }
        Ok(())
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[id].value)
    }

    fn with_values<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Concatenate along `axis`.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands".to_string()));
        }
        for p in parts {
            self.check_gen(*p)?;
        }
        let value = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            ops::concat(&tensors, axis)?
        };
        let requires = parts.iter().any(|p| self.requires(p.id));
        self.push(
            "concat",
            value,
            requires,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
        )
    }

    /// Record a node with custom backward behavior.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Result<Var<'t>> {
        for p in inputs {
            self.check_gen(*p)?;
        }
        let requires = inputs.iter().any(|p| self.requires(p.id));
        let name = op.name();
        self.push(
            name,
            value,
            requires,
            Op::Custom {
                inputs: inputs.iter().map(|p| p.id).collect(),
                op,
            },
        )
    }

    /// Reverse sweep from a scalar root. Returns one gradient per node that
    /// participates in the graph, then clears the tape.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_gen(root)?;
        let gen = self.generation.get();
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[root.id].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", nodes[root.id].value.shape()),
            ));
        }
        let detached = !nodes[root.id].requires_grad;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !detached {
            grads[root.id] = Some(Tensor::scalar(1.0));
            for id in (0..=root.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                if !nodes[id].requires_grad {
                    continue;
                }
                backprop_node(&nodes, id, &g, &mut grads)?;
                grads[id] = Some(g);
            }
        }
        // The tape is spent: drop the graph and invalidate outstanding Vars.
        nodes.clear();
        self.generation.set(gen + 1);
        self.kink_hit.set(false);
        Ok(Gradients {
            grads,
            gen,
            detached,
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn backprop_node(
    nodes: &[Node],
    id: usize,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[*a], ops::reduce_to_shape(g, val(*a).shape()));
            }
            if wants(*b) {
                accumulate(&mut grads[*b], ops::reduce_to_shape(g, val(*b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(&mut grads[*a], ops::reduce_to_shape(g, val(*a).shape()));
            }
            if wants(*b) {
                let mut r = ops::reduce_to_shape(g, val(*b).shape());
                for v in r.data_mut() {
                    *v = -*v;
                }
                accumulate(&mut grads[*b], r);
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let full = ops::apply2("mul_backward", g, val(*b), |g, b| g * b)?;
                accumulate(&mut grads[*a], ops::reduce_to_shape(&full, val(*a).shape()));
            }
            if wants(*b) {
                let full = ops::apply2("mul_backward", g, val(*a), |g, a| g * a)?;
                accumulate(&mut grads[*b], ops::reduce_to_shape(&full, val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            if wants(*a) {
                let full = ops::apply2("div_backward", g, val(*b), |g, b| g / b)?;
                accumulate(&mut grads[*a], ops::reduce_to_shape(&full, val(*a).shape()));
            }
            if wants(*b) {
                // d/db (a/b) = -out/b
                let g_out = ops::apply2("div_backward", g, &nodes[id].value, |g, o| g * o)?;
                let full = ops::apply2("div_backward", &g_out, val(*b), |t, b| -t / b)?;
                accumulate(&mut grads[*b], ops::reduce_to_shape(&full, val(*b).shape()));
            }
        }
        Op::Matmul(a, b) => {
            if wants(*a) {
                let da = grads[*a].get_or_insert_with(|| Tensor::zeros(val(*a).shape()));
                ops::gemm(false, true, 1.0, g, val(*b), 1.0, da)?;
            }
            if wants(*b) {
                let db = grads[*b].get_or_insert_with(|| Tensor::zeros(val(*b).shape()));
                ops::gemm(true, false, 1.0, val(*a), g, 1.0, db)?;
            }
        }
        Op::Relu(a) => {
            if wants(*a) {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Softplus(a) => {
            if wants(*a) {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= special::sigmoid(xv);
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Sigmoid(a) => {
            if wants(*a) {
                let y = &nodes[id].value;
                let mut d = g.clone();
                for (dv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *dv *= yv * (1.0 - yv);
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Exp(a) => {
            if wants(*a) {
                let y = &nodes[id].value;
                let mut d = g.clone();
                for (dv, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *dv *= yv;
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Log(a) => {
            if wants(*a) {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv /= xv;
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Lgamma(a) => {
            if wants(*a) {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= special::digamma(xv);
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Digamma(a) => {
            if wants(*a) {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= special::trigamma(xv);
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Square(a) => {
            if wants(*a) {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= 2.0 * xv;
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Neg(a) => {
            if wants(*a) {
                let mut d = g.clone();
                for dv in d.data_mut() {
                    *dv = -*dv;
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Scale(a, c) => {
            if wants(*a) {
                let mut d = g.clone();
                for dv in d.data_mut() {
                    *dv *= c;
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::AddConst(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], g.clone());
            }
        }
        Op::Clamp(a, lo, hi) => {
            if wants(*a) {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if xv < *lo || xv > *hi {
                        *dv = 0.0;
                    }
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Sum(a) => {
            if wants(*a) {
                let gs = g.as_scalar()?;
                accumulate(&mut grads[*a], Tensor::full(val(*a).shape(), gs));
            }
        }
        Op::Mean(a) => {
            if wants(*a) {
                let n = val(*a).len() as f64;
                let gs = g.as_scalar()? / n;
                accumulate(&mut grads[*a], Tensor::full(val(*a).shape(), gs));
            }
        }
        Op::SumAxis(a, axis) => {
            if wants(*a) {
                accumulate(&mut grads[*a], spread_axis(g, val(*a).shape(), *axis, 1.0));
            }
        }
        Op::MeanAxis(a, axis) => {
            if wants(*a) {
                let n = val(*a).shape()[*axis] as f64;
                accumulate(&mut grads[*a], spread_axis(g, val(*a).shape(), *axis, 1.0 / n));
            }
        }
        Op::BroadcastTo(a) => {
            if wants(*a) {
                accumulate(&mut grads[*a], ops::reduce_to_shape(g, val(*a).shape()));
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                let d = g.clone().reshape(val(*a).shape())?;
                accumulate(&mut grads[*a], d);
            }
        }
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            for p in parts {
                let extent = if val(*p).rank() <= 1 {
                    val(*p).len()
                } else {
                    val(*p).shape()[*axis]
                };
                if wants(*p) {
                    let piece = if g.rank() <= 1 {
                        ops::slice(g, 0, offset, offset + extent)?
                    } else {
                        ops::slice(g, *axis, offset, offset + extent)?
                    };
                    accumulate(&mut grads[*p], piece.reshape(val(*p).shape())?);
                }
                offset += extent;
            }
        }
        Op::Slice { input, axis, start } => {
            if wants(*input) {
                accumulate(
                    &mut grads[*input],
                    ops::slice_backward(g, val(*input).shape(), *axis, *start),
                );
            }
        }
        Op::LogSumExpRows(a) => {
            if wants(*a) {
                let x = val(*a);
                let out = &nodes[id].value;
                let c = x.shape()[1];
                let mut d = Tensor::zeros(x.shape());
                for r in 0..x.shape()[0] {
                    let gr = g.data()[r];
                    let o = out.data()[r];
                    for j in 0..c {
                        d.data_mut()[r * c + j] = gr * (x.at(r, j) - o).exp();
                    }
                }
                accumulate(&mut grads[*a], d);
            }
        }
        Op::BatchNormTrain { x, gamma, beta, saved } => {
            let (dx, dgamma, dbeta) = ops::batchnorm_train_backward(g, val(*gamma), saved);
            if wants(*x) {
                accumulate(&mut grads[*x], dx);
            }
            if wants(*gamma) {
                accumulate(&mut grads[*gamma], dgamma);
            }
            if wants(*beta) {
                accumulate(&mut grads[*beta], dbeta);
            }
        }
        Op::BatchNormInfer { x, gamma, beta, norm, scale } => {
            if wants(*x) {
                let d = ops::apply2("batch_norm_backward", g, scale, |g, s| g * s)?;
                accumulate(&mut grads[*x], d);
            }
            if wants(*gamma) {
                let prod = ops::apply2("batch_norm_backward", g, norm, |g, n| g * n)?;
                accumulate(&mut grads[*gamma], ops::sum_axis(&prod, 0)?);
            }
            if wants(*beta) {
                accumulate(&mut grads[*beta], ops::sum_axis(g, 0)?);
            }
        }
        Op::Custom { inputs, op } => {
            let tensors: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let input_grads = op.backward(g, &tensors, &nodes[id].value);
            debug_assert_eq!(input_grads.len(), inputs.len());
            for (i, ig) in inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    if wants(*i) {
                        accumulate(&mut grads[*i], ig);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Expand an axis-reduced gradient back over `shape`, scaled by `factor`.
fn spread_axis(g: &Tensor, shape: &[usize], axis: usize, factor: f64) -> Tensor {
    let (n, c) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(shape);
    if axis == 0 {
        for r in 0..n {
            for j in 0..c {
                out.data_mut()[r * c + j] = g.data()[j] * factor;
            }
        }
    } else {
        for r in 0..n {
            let gv = g.data()[r] * factor;
            for j in 0..c {
                out.data_mut()[r * c + j] = gv;
            }
        }
    }
    out
}

macro_rules! binary_op {
    ($name:ident, $variant:ident, $f:expr) => {
        pub fn $name(self, rhs: Var<'t>) -> Result<Var<'t>> {
            self.tape.check_gen(self)?;
            self.tape.check_gen(rhs)?;
            let value = self
                .tape
                .with_values(self.id, rhs.id, |a, b| ops::apply2(stringify!($name), a, b, $f))?;
            let requires = self.tape.requires(self.id) || self.tape.requires(rhs.id);
            self.tape.push(
                stringify!($name),
                value,
                requires,
                Op::$variant(self.id, rhs.id),
            )
        }
    };
}

macro_rules! unary_op {
    ($name:ident, $variant:ident, $f:expr) => {
        pub fn $name(self) -> Result<Var<'t>> {
            self.tape.check_gen(self)?;
            let value = self.tape.with_value(self.id, |a| ops::map(a, $f));
            let requires = self.tape.requires(self.id);
            self.tape
                .push(stringify!($name), value, requires, Op::$variant(self.id))
        }
    };
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Clone of the node's value.
    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, |t| t.clone())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    binary_op!(add, Add, |a, b| a + b);
    binary_op!(sub, Sub, |a, b| a - b);
    binary_op!(mul, Mul, |a, b| a * b);
    binary_op!(div, Div, |a, b| a / b);

    unary_op!(relu_raw, Relu, |x| if x > 0.0 { x } else { 0.0 });
    unary_op!(softplus, Softplus, special::softplus);
    unary_op!(sigmoid, Sigmoid, special::sigmoid);
    unary_op!(exp, Exp, f64::exp);
    unary_op!(square, Square, |x| x * x);
    unary_op!(neg, Neg, |x| -x);

    /// Rectified linear unit. The subgradient at exactly zero is zero; hitting
    /// the kink sets the tape's kink flag for diagnostics.
    pub fn relu(self) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let at_kink = self
            .tape
            .with_value(self.id, |t| t.data().iter().any(|v| v.abs() <= 1e-12));
        if at_kink {
            self.tape.kink_hit.set(true);
        }
        self.relu_raw()
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        self.domain_check("log", |x| x > 0.0, "argument must be strictly positive")?;
        let value = self.tape.with_value(self.id, |a| ops::map(a, f64::ln));
        let requires = self.tape.requires(self.id);
        self.tape.push("log", value, requires, Op::Log(self.id))
    }

    pub fn lgamma(self) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        self.domain_check("lgamma", |x| x > 0.0, "argument must be strictly positive")?;
        let value = self.tape.with_value(self.id, |a| ops::map(a, special::lgamma));
        let requires = self.tape.requires(self.id);
        self.tape.push("lgamma", value, requires, Op::Lgamma(self.id))
    }

    pub fn digamma(self) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        self.domain_check("digamma", |x| x > 0.0, "argument must be strictly positive")?;
        let value = self.tape.with_value(self.id, |a| ops::map(a, special::digamma));
        let requires = self.tape.requires(self.id);
        self.tape.push("digamma", value, requires, Op::Digamma(self.id))
    }

    fn domain_check(
        &self,
        op: &'static str,
        ok: impl Fn(f64) -> bool,
        msg: &str,
    ) -> Result<()> {
        let bad = self.tape.with_value(self.id, |t| {
            t.data().iter().find(|v| !ok(**v)).copied()
        });
        if let Some(v) = bad {
            return Err(Error::domain(op, format!("{msg} (got {v})")));
        }
        Ok(())
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let value = self.tape.with_value(self.id, |a| ops::map(a, |x| c * x));
        let requires = self.tape.requires(self.id);
        self.tape.push("scale", value, requires, Op::Scale(self.id, c))
    }

    pub fn add_const(self, c: f64) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let value = self.tape.with_value(self.id, |a| ops::map(a, |x| x + c));
        let requires = self.tape.requires(self.id);
        self.tape
            .push("add_const", value, requires, Op::AddConst(self.id))
    }

    /// Clamp to [lo, hi]; gradient is passed through inside the interval
    /// (inclusive) and zero outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let at_edge = self.tape.with_value(self.id, |t| {
            t.data().iter().any(|v| *v < lo || *v > hi)
        });
        if at_edge {
            self.tape.kink_hit.set(true);
        }
        let value = self
            .tape
            .with_value(self.id, |a| ops::map(a, |x| x.clamp(lo, hi)));
        let requires = self.tape.requires(self.id);
        self.tape
            .push("clamp", value, requires, Op::Clamp(self.id, lo, hi))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        self.tape.check_gen(rhs)?;
        let value = self
            .tape
            .with_values(self.id, rhs.id, |a, b| ops::matmul(a, b))?;
        let requires = self.tape.requires(self.id) || self.tape.requires(rhs.id);
        self.tape
            .push("matmul", value, requires, Op::Matmul(self.id, rhs.id))
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let value = self.tape.with_value(self.id, |a| Tensor::scalar(ops::sum_all(a)));
        let requires = self.tape.requires(self.id);
        self.tape.push("sum", value, requires, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let n = self.tape.with_value(self.id, |a| a.len());
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor".to_string()));
        }
        let value = self
            .tape
            .with_value(self.id, |a| Tensor::scalar(ops::sum_all(a) / n as f64));
        let requires = self.tape.requires(self.id);
        self.tape.push("mean", value, requires, Op::Mean(self.id))
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let value = self.tape.with_value(self.id, |a| ops::sum_axis(a, axis))?;
        let requires = self.tape.requires(self.id);
        self.tape
            .push("sum_axis", value, requires, Op::SumAxis(self.id, axis))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let (value, _n) = self.tape.with_value(self.id, |a| {
            let n = if a.rank() == 2 { a.shape()[axis] } else { 0 };
            (ops::sum_axis(a, axis).map(|t| ops::map(&t, |x| x / n as f64)), n)
        });
        let value = value?;
        let requires = self.tape.requires(self.id);
        self.tape
            .push("mean_axis", value, requires, Op::MeanAxis(self.id, axis))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let value = self.tape.with_value(self.id, |a| {
            if broadcast_shapes(a.shape(), shape) != Some(shape.to_vec()) {
                return Err(Error::shape(
                    "broadcast",
                    format!("cannot broadcast {:?} to {:?}", a.shape(), shape),
                ));
            }
            ops::apply2("broadcast", &Tensor::zeros(shape), a, |_, x| x)
        })?;
        let requires = self.tape.requires(self.id);
        self.tape
            .push("broadcast", value, requires, Op::BroadcastTo(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let value = self.tape.with_value(self.id, |a| a.clone().reshape(shape))?;
        let requires = self.tape.requires(self.id);
        self.tape.push("reshape", value, requires, Op::Reshape(self.id))
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let value = self
            .tape
            .with_value(self.id, |a| ops::slice(a, axis, start, end))?;
        let requires = self.tape.requires(self.id);
        self.tape.push(
            "slice",
            value,
            requires,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
        )
    }

    /// Log-sum-exp along axis 1 of a rank-2 tensor, max-shifted.
    pub fn log_sum_exp_rows(self) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let value = self.tape.with_value(self.id, |a| ops::lse_rows(a))?;
        let requires = self.tape.requires(self.id);
        self.tape
            .push("log_sum_exp", value, requires, Op::LogSumExpRows(self.id))
    }

    /// Training-mode batch norm over axis 0. Returns the output together
    /// with the batch statistics so the caller can maintain running stats.
    pub fn batch_norm_train(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        eps: f64,
    ) -> Result<(Var<'t>, Tensor, Tensor)> {
        self.tape.check_gen(self)?;
        let (value, saved) = {
            let nodes = self.tape.nodes.borrow();
            ops::batchnorm_train(&nodes[self.id].value, &nodes[gamma.id].value, &nodes[beta.id].value, eps)?
        };
        let requires = self.tape.requires(self.id)
            || self.tape.requires(gamma.id)
            || self.tape.requires(beta.id);
        let batch_mean = saved.batch_mean.clone();
        let batch_var = saved.batch_var.clone();
        let var = self.tape.push(
            "batch_norm",
            value,
            requires,
            Op::BatchNormTrain {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                saved: Box::new(saved),
            },
        )?;
        Ok((var, batch_mean, batch_var))
    }

    /// Inference-mode batch norm using fixed running statistics.
    pub fn batch_norm_infer(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var<'t>> {
        self.tape.check_gen(self)?;
        let (value, norm, scale) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let gamma_t = &nodes[gamma.id].value;
            let beta_t = &nodes[beta.id].value;
            let value = ops::batchnorm_infer(x, gamma_t, beta_t, running_mean, running_var, eps)?;
            let inv_std: Vec<f64> = running_var
                .data()
                .iter()
                .map(|&v| 1.0 / (v + eps).sqrt())
                .collect();
            let scale: Vec<f64> = gamma_t
                .data()
                .iter()
                .zip(&inv_std)
                .map(|(&g, &i)| g * i)
                .collect();
            let mut norm = Tensor::zeros(x.shape());
            let c = x.shape()[1];
            for r in 0..x.shape()[0] {
                for j in 0..c {
                    norm.data_mut()[r * c + j] = (x.at(r, j) - running_mean.data()[j]) * inv_std[j];
                }
            }
            (value, norm, Tensor::vector(&scale))
        };
        let requires = self.tape.requires(self.id)
            || self.tape.requires(gamma.id)
            || self.tape.requires(beta.id);
        self.tape.push(
            "batch_norm",
            value,
            requires,
            Op::BatchNormInfer {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                norm,
                scale,
            },
        )
    }
}
