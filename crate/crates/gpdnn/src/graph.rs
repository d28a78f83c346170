//! Tape-based reverse-mode automatic differentiation over `Tensor`.
//!
//! A `Graph` records every operation eagerly (values are computed at push
//! time) in a flat tape addressed by node id; `backward` runs one reverse
//! sweep accumulating gradients additively at fan-out points. The tape is
//! single-threaded by design. Every forward op validates shapes up front and
//! fails the moment it produces a non-finite value, naming itself in the
//! error — NaN never propagates silently, in either direction.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::{self, ConvDims, Padding};
use crate::tensor::{binary_broadcast, numel_of, reduce_to_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Relu,
    Tanh,
    Sigmoid,
    Square,
    Sqrt,
    NormCdf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    Prod,
}

enum Op {
    Leaf,
    Unary { kind: UnaryKind, x: usize },
    Binary { kind: BinaryKind, a: usize, b: usize },
    /// mul * x + add, elementwise with scalar constants; only the slope
    /// matters in reverse.
    Affine { x: usize, mul: f64 },
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    Cholesky { a: usize },
    TriSolve { l: usize, b: usize, transpose: bool },
    Reduce { kind: ReduceKind, x: usize, axis: Option<usize>, arg: Vec<u32> },
    Conv2d { x: usize, w: usize, bias: usize, dims: ConvDims },
    MaxPool2d { x: usize, arg: Vec<u32>, x_len: usize },
    LogSoftmax { x: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    SelectCols { x: usize, cols: Vec<usize> },
    StackCols { xs: Vec<usize> },
    DiagEmbed { x: usize },
    Dropout { x: usize, mask: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Relu => "relu",
                UnaryKind::Tanh => "tanh",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Square => "square",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::NormCdf => "normal_cdf",
            },
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Affine { .. } => "affine",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Cholesky { .. } => "cholesky",
            Op::TriSolve { .. } => "triangular_solve",
            Op::Reduce { kind, .. } => match kind {
                ReduceKind::Sum => "sum",
                ReduceKind::Mean => "mean",
                ReduceKind::Max => "max",
                ReduceKind::Prod => "prod",
            },
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::GatherRows { .. } => "gather_rows",
            Op::SelectCols { .. } => "select_cols",
            Op::StackCols { .. } => "stack_cols",
            Op::DiagEmbed { .. } => "diag_embed",
            Op::Dropout { .. } => "dropout",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
}

/// Handle to a recording tape. Cloning shares the tape.
#[derive(Clone, Default)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

/// Tracked tensor: a node id on a shared tape.
#[derive(Clone)]
pub struct Var {
    tape: Rc<RefCell<Tape>>,
    id: usize,
}

/// Gradients keyed by node id, populated for leaves (parameters and inputs).
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: &Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, or zeros when the loss did not reach it.
    pub fn wrt_or_zeros(&self, v: &Var) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Trainable leaf: gradients flow to it.
    pub fn var(&self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Constant leaf: backward skips anything that only feeds constants.
    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NotFinite { op: "leaf".into() });
        }
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Ok(Var { tape: self.tape.clone(), id: tape.nodes.len() - 1 })
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NotFinite { op: op.name().into() });
        }
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node { value, op, needs_grad });
        Ok(Var { tape: self.tape.clone(), id: tape.nodes.len() - 1 })
    }

    fn node_needs_grad(&self, id: usize) -> bool {
        self.tape.borrow().nodes[id].needs_grad
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.tape.borrow().nodes[id].value.clone()
    }

    /// Stack C vectors of shape [B] into a [B, C] matrix (column c from
    /// input c).
    pub fn stack_cols(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArg("stack_cols: empty input list".into()));
        }
        let b = {
            let tape = self.tape.borrow();
            let shape0 = tape.nodes[xs[0].id].value.shape().to_vec();
            if shape0.len() != 1 {
                return Err(Error::shape("stack_cols", format!("expected rank-1 inputs, got {:?}", shape0)));
            }
            for x in xs {
                let s = tape.nodes[x.id].value.shape();
                if s != shape0.as_slice() {
                    return Err(Error::shape("stack_cols", format!("mixed shapes {:?} vs {:?}", shape0, s)));
                }
            }
            shape0[0]
        };
        let c = xs.len();
        let mut data = vec![0.0; b * c];
        let needs;
        {
            let tape = self.tape.borrow();
            needs = xs.iter().any(|x| tape.nodes[x.id].needs_grad);
            for (j, x) in xs.iter().enumerate() {
                let src = tape.nodes[x.id].value.data();
                for i in 0..b {
                    data[i * c + j] = src[i];
                }
            }
        }
        let value = Tensor::new(&[b, c], data)?;
        self.push(value, Op::StackCols { xs: xs.iter().map(|x| x.id).collect() }, needs)
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every leaf
    /// that the loss reaches; bitwise deterministic for identical tapes.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        let tape = self.tape.borrow();
        let n = tape.nodes.len();
        let loss_node = &tape.nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.id] = Some(Tensor::full(loss_node.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &tape.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&tape, id, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }
}

/// Accumulate `contrib` into `grads[target]`, failing fast on NaN.
fn add_grad(tape: &Tape, grads: &mut [Option<Tensor>], target: usize, contrib: Tensor, op: &Op) -> Result<()> {
    if !tape.nodes[target].needs_grad {
        return Ok(());
    }
    if !contrib.all_finite() {
        return Err(Error::NotFinite { op: format!("backward of {}", op.name()) });
    }
    debug_assert_eq!(contrib.shape(), tape.nodes[target].value.shape());
    match &mut grads[target] {
        Some(acc) => {
            for (a, &c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
    Ok(())
}

fn backprop_node(tape: &Tape, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let node = &tape.nodes[id];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary { kind, x } => {
            let xv = &tape.nodes[*x].value;
            let gx = match kind {
                UnaryKind::Exp => binary_broadcast("exp'", g, y, |gv, yv| gv * yv)?,
                UnaryKind::Log => binary_broadcast("log'", g, xv, |gv, v| gv / v)?,
                UnaryKind::Relu => binary_broadcast("relu'", g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 })?,
                UnaryKind::Tanh => binary_broadcast("tanh'", g, y, |gv, yv| gv * (1.0 - yv * yv))?,
                UnaryKind::Sigmoid => binary_broadcast("sigmoid'", g, y, |gv, yv| gv * yv * (1.0 - yv))?,
                UnaryKind::Square => binary_broadcast("square'", g, xv, |gv, v| gv * 2.0 * v)?,
                UnaryKind::Sqrt => binary_broadcast("sqrt'", g, y, |gv, yv| gv / (2.0 * yv))?,
                UnaryKind::NormCdf => binary_broadcast("normal_cdf'", g, xv, |gv, v| {
                    gv * (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt()
                })?,
            };
            add_grad(tape, grads, *x, gx, &node.op)?;
        }
        Op::Binary { kind, a, b } => {
            let av = &tape.nodes[*a].value;
            let bv = &tape.nodes[*b].value;
            match kind {
                BinaryKind::Add => {
                    add_grad(tape, grads, *a, reduce_to_shape(g, av.shape()), &node.op)?;
                    add_grad(tape, grads, *b, reduce_to_shape(g, bv.shape()), &node.op)?;
                }
                BinaryKind::Sub => {
                    add_grad(tape, grads, *a, reduce_to_shape(g, av.shape()), &node.op)?;
                    let gb = g.map(|v| -v);
                    add_grad(tape, grads, *b, reduce_to_shape(&gb, bv.shape()), &node.op)?;
                }
                BinaryKind::Mul => {
                    if tape.nodes[*a].needs_grad {
                        let ga = binary_broadcast("mul'", g, bv, |gv, v| gv * v)?;
                        add_grad(tape, grads, *a, reduce_to_shape(&ga, av.shape()), &node.op)?;
                    }
                    if tape.nodes[*b].needs_grad {
                        let gb = binary_broadcast("mul'", g, av, |gv, v| gv * v)?;
                        add_grad(tape, grads, *b, reduce_to_shape(&gb, bv.shape()), &node.op)?;
                    }
                }
                BinaryKind::Div => {
                    if tape.nodes[*a].needs_grad {
                        let ga = binary_broadcast("div'", g, bv, |gv, v| gv / v)?;
                        add_grad(tape, grads, *a, reduce_to_shape(&ga, av.shape()), &node.op)?;
                    }
                    if tape.nodes[*b].needs_grad {
                        // d(a/b)/db = -a / b^2; fold g in first, then combine.
                        let ga_over_b2 = binary_broadcast("div'", g, y, |gv, yv| gv * yv)?;
                        let gb = binary_broadcast("div'", &ga_over_b2, bv, |gv, v| -gv / v)?;
                        add_grad(tape, grads, *b, reduce_to_shape(&gb, bv.shape()), &node.op)?;
                    }
                }
            }
        }
        Op::Affine { x, mul } => {
            let gx = g.map(|v| v * mul);
            add_grad(tape, grads, *x, gx, &node.op)?;
        }
        Op::Matmul { a, b } => {
            let av = &tape.nodes[*a].value;
            let bv = &tape.nodes[*b].value;
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n2 = bv.shape()[1];
            if tape.nodes[*a].needs_grad {
                // dA = dC B^T
                let mut ga = vec![0.0; m * k];
                linalg::gemm(false, true, m, n2, k, 1.0, g.data(), bv.data(), 0.0, &mut ga);
                add_grad(tape, grads, *a, Tensor::new(&[m, k], ga)?, &node.op)?;
            }
            if tape.nodes[*b].needs_grad {
                // dB = A^T dC
                let mut gb = vec![0.0; k * n2];
                linalg::gemm(true, false, k, m, n2, 1.0, av.data(), g.data(), 0.0, &mut gb);
                add_grad(tape, grads, *b, Tensor::new(&[k, n2], gb)?, &node.op)?;
            }
        }
        Op::Transpose { x } => {
            add_grad(tape, grads, *x, g.transposed()?, &node.op)?;
        }
        Op::Reshape { x } => {
            let xs = tape.nodes[*x].value.shape().to_vec();
            add_grad(tape, grads, *x, g.reshaped(&xs)?, &node.op)?;
        }
        Op::Cholesky { a } => {
            let n2 = y.shape()[0];
            let ga = linalg::cholesky_backward(y.data(), n2, g.data())?;
            add_grad(tape, grads, *a, Tensor::new(&[n2, n2], ga)?, &node.op)?;
        }
        Op::TriSolve { l, b, transpose } => {
            let lv = &tape.nodes[*l].value;
            let n2 = lv.shape()[0];
            let ncols = y.numel() / n2;
            // grad_b solves the transposed system.
            let mut gb = g.data().to_vec();
            linalg::solve_triangular(lv.data(), n2, &mut gb, ncols, !*transpose)?;
            if tape.nodes[*l].needs_grad {
                // no transpose: grad_L = -gb y^T ; transpose: grad_L = -y gb^T
                let mut gl = vec![0.0; n2 * n2];
                if !*transpose {
                    linalg::gemm(false, true, n2, ncols, n2, -1.0, &gb, y.data(), 0.0, &mut gl);
                } else {
                    linalg::gemm(false, true, n2, ncols, n2, -1.0, y.data(), &gb, 0.0, &mut gl);
                }
                // L is lower-triangular storage: zero the strict upper part.
                for i in 0..n2 {
                    for j in (i + 1)..n2 {
                        gl[i * n2 + j] = 0.0;
                    }
                }
                add_grad(tape, grads, *l, Tensor::new(&[n2, n2], gl)?, &node.op)?;
            }
            add_grad(tape, grads, *b, Tensor::new(tape.nodes[*b].value.shape(), gb)?, &node.op)?;
        }
        Op::Reduce { kind, x, axis, arg } => {
            let xv = &tape.nodes[*x].value;
            let gx = reduce_backward(*kind, xv, y, g, *axis, arg);
            add_grad(tape, grads, *x, gx, &node.op)?;
        }
        Op::Conv2d { x, w, bias, dims } => {
            let xv = &tape.nodes[*x].value;
            let wv = &tape.nodes[*w].value;
            let need_dx = tape.nodes[*x].needs_grad;
            let (dx, dw, db) = linalg::conv2d_backward(dims, xv.data(), wv.data(), g.data(), need_dx);
            if let Some(dx) = dx {
                add_grad(tape, grads, *x, Tensor::new(xv.shape(), dx)?, &node.op)?;
            }
            if tape.nodes[*w].needs_grad {
                add_grad(tape, grads, *w, Tensor::new(wv.shape(), dw)?, &node.op)?;
            }
            add_grad(tape, grads, *bias, Tensor::new(&[dims.cout], db)?, &node.op)?;
        }
        Op::MaxPool2d { x, arg, x_len } => {
            let dx = linalg::maxpool2d_backward(*x_len, arg, g.data());
            let xs = tape.nodes[*x].value.shape().to_vec();
            add_grad(tape, grads, *x, Tensor::new(&xs, dx)?, &node.op)?;
        }
        Op::LogSoftmax { x } => {
            // gx = g - softmax(x) * rowsum(g), rows over the last axis.
            let c = *y.shape().last().unwrap();
            let mut gx = vec![0.0; y.numel()];
            for (row, (grow, yrow)) in gx.chunks_exact_mut(c).zip(g.data().chunks_exact(c).zip(y.data().chunks_exact(c))) {
                let gsum: f64 = grow.iter().sum();
                for j in 0..c {
                    row[j] = grow[j] - yrow[j].exp() * gsum;
                }
            }
            add_grad(tape, grads, *x, Tensor::new(y.shape(), gx)?, &node.op)?;
        }
        Op::GatherRows { x, idx } => {
            let xs = tape.nodes[*x].value.shape().to_vec();
            let c = xs[1];
            let mut gx = Tensor::zeros(&xs);
            for (b, (&col, &gv)) in idx.iter().zip(g.data()).enumerate() {
                gx.data_mut()[b * c + col] += gv;
            }
            add_grad(tape, grads, *x, gx, &node.op)?;
        }
        Op::SelectCols { x, cols } => {
            let xs = tape.nodes[*x].value.shape().to_vec();
            let c = xs[1];
            let k = cols.len();
            let mut gx = Tensor::zeros(&xs);
            for b in 0..xs[0] {
                for (j, &col) in cols.iter().enumerate() {
                    gx.data_mut()[b * c + col] += g.data()[b * k + j];
                }
            }
            add_grad(tape, grads, *x, gx, &node.op)?;
        }
        Op::StackCols { xs } => {
            let b = y.shape()[0];
            let c = xs.len();
            for (j, &xid) in xs.iter().enumerate() {
                if !tape.nodes[xid].needs_grad {
                    continue;
                }
                let mut gx = vec![0.0; b];
                for i in 0..b {
                    gx[i] = g.data()[i * c + j];
                }
                add_grad(tape, grads, xid, Tensor::from_vec(gx), &node.op)?;
            }
        }
        Op::DiagEmbed { x } => {
            let n2 = y.shape()[0];
            let mut gx = vec![0.0; n2];
            for i in 0..n2 {
                gx[i] = g.data()[i * n2 + i];
            }
            add_grad(tape, grads, *x, Tensor::from_vec(gx), &node.op)?;
        }
        Op::Dropout { x, mask } => {
            let mut gx = g.clone();
            for (gv, &m) in gx.data_mut().iter_mut().zip(mask) {
                *gv *= m;
            }
            add_grad(tape, grads, *x, gx, &node.op)?;
        }
    }
    Ok(())
}

/// Decompose `shape` around `axis` into (outer, mid, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let mid = shape[axis];
    let inner = numel_of(&shape[axis + 1..]);
    (outer, mid, inner)
}

fn reduce_backward(kind: ReduceKind, xv: &Tensor, _y: &Tensor, g: &Tensor, axis: Option<usize>, arg: &[u32]) -> Tensor {
    let mut gx = Tensor::zeros(xv.shape());
    match (kind, axis) {
        (ReduceKind::Sum, None) => {
            let gs = g.data()[0];
            gx.data_mut().fill(gs);
        }
        (ReduceKind::Mean, None) => {
            let gs = g.data()[0] / xv.numel() as f64;
            gx.data_mut().fill(gs);
        }
        (ReduceKind::Max, None) => {
            gx.data_mut()[arg[0] as usize] = g.data()[0];
        }
        (ReduceKind::Prod, None) => {
            prod_backward_strided(xv.data(), g.data(), gx.data_mut(), 1, xv.numel(), 1);
        }
        (ReduceKind::Sum, Some(a)) | (ReduceKind::Mean, Some(a)) => {
            let (outer, mid, inner) = axis_split(xv.shape(), a);
            let scale = if kind == ReduceKind::Mean { 1.0 / mid as f64 } else { 1.0 };
            let gd = g.data();
            let gxd = gx.data_mut();
            for o in 0..outer {
                for m in 0..mid {
                    for i in 0..inner {
                        gxd[(o * mid + m) * inner + i] = gd[o * inner + i] * scale;
                    }
                }
            }
        }
        (ReduceKind::Max, Some(_)) => {
            for (k, &a) in arg.iter().enumerate() {
                gx.data_mut()[a as usize] += g.data()[k];
            }
        }
        (ReduceKind::Prod, Some(a)) => {
            let (outer, mid, inner) = axis_split(xv.shape(), a);
            let gd = g.data();
            let gxd = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * mid * inner + i;
                    prod_backward_strided_at(xv.data(), gd[o * inner + i], gxd, base, mid, inner);
                }
            }
        }
    }
    gx
}

/// Exact leave-one-out product gradient via prefix/suffix scans; stable even
/// with zero factors (no division).
fn prod_backward_strided(x: &[f64], g: &[f64], gx: &mut [f64], _outer: usize, mid: usize, _inner: usize) {
    prod_backward_strided_at(x, g[0], gx, 0, mid, 1);
}

fn prod_backward_strided_at(x: &[f64], g: f64, gx: &mut [f64], base: usize, mid: usize, stride: usize) {
    // prefix pass
    let mut pre = 1.0;
    for m in 0..mid {
        gx[base + m * stride] = pre * g;
        pre *= x[base + m * stride];
    }
    // suffix pass
    let mut suf = 1.0;
    for m in (0..mid).rev() {
        gx[base + m * stride] *= suf;
        suf *= x[base + m * stride];
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    fn graph(&self) -> Graph {
        Graph { tape: self.tape.clone() }
    }

    pub fn value(&self) -> Tensor {
        self.graph().value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.borrow().nodes[self.id].value.shape().to_vec()
    }

    fn needs(&self) -> bool {
        self.graph().node_needs_grad(self.id)
    }

    fn same_tape(&self, o: &Var, op: &str) -> Result<()> {
        if !Rc::ptr_eq(&self.tape, &o.tape) {
            return Err(Error::InvalidArg(format!("{}: operands from different graphs", op)));
        }
        Ok(())
    }

    fn unary(&self, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value().map(f);
        self.graph().push(value, Op::Unary { kind, x: self.id }, self.needs())
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(UnaryKind::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Var> {
        self.unary(UnaryKind::Log, f64::ln)
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(UnaryKind::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary(UnaryKind::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn square(&self) -> Result<Var> {
        self.unary(UnaryKind::Square, |v| v * v)
    }

    pub fn sqrt(&self) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, f64::sqrt)
    }

    /// Standard normal CDF, elementwise: Phi(x) = erfc(-x/sqrt(2))/2.
    pub fn normal_cdf(&self) -> Result<Var> {
        self.unary(UnaryKind::NormCdf, |v| 0.5 * libm::erfc(-v / std::f64::consts::SQRT_2))
    }

    /// mul * x + add with scalar constants (negation, scaling, shifting).
    pub fn affine(&self, mul: f64, add: f64) -> Result<Var> {
        let value = self.value().map(|v| mul * v + add);
        self.graph().push(value, Op::Affine { x: self.id, mul }, self.needs())
    }

    pub fn neg(&self) -> Result<Var> {
        self.affine(-1.0, 0.0)
    }

    fn binary(&self, o: &Var, kind: BinaryKind, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_tape(o, "binary op")?;
        let value = binary_broadcast(
            match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            &self.value(),
            &o.value(),
            f,
        )?;
        self.graph().push(value, Op::Binary { kind, a: self.id, b: o.id }, self.needs() || o.needs())
    }

    pub fn add(&self, o: &Var) -> Result<Var> {
        self.binary(o, BinaryKind::Add, |a, b| a + b)
    }

    pub fn sub(&self, o: &Var) -> Result<Var> {
        self.binary(o, BinaryKind::Sub, |a, b| a - b)
    }

    pub fn mul(&self, o: &Var) -> Result<Var> {
        self.binary(o, BinaryKind::Mul, |a, b| a * b)
    }

    pub fn div(&self, o: &Var) -> Result<Var> {
        self.binary(o, BinaryKind::Div, |a, b| a / b)
    }

    pub fn matmul(&self, o: &Var) -> Result<Var> {
        self.same_tape(o, "matmul")?;
        let (av, bv) = (self.value(), o.value());
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("incompatible shapes {:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut c = vec![0.0; m * n];
        linalg::gemm(false, false, m, k, n, 1.0, av.data(), bv.data(), 0.0, &mut c);
        self.graph()
            .push(Tensor::new(&[m, n], c)?, Op::Matmul { a: self.id, b: o.id }, self.needs() || o.needs())
    }

    pub fn t(&self) -> Result<Var> {
        let value = self.value().transposed()?;
        self.graph().push(value, Op::Transpose { x: self.id }, self.needs())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshaped(shape)?;
        self.graph().push(value, Op::Reshape { x: self.id }, self.needs())
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix; the
    /// backward pass produces a symmetrized gradient w.r.t. the input.
    pub fn cholesky(&self) -> Result<Var> {
        let av = self.value();
        if av.rank() != 2 || av.shape()[0] != av.shape()[1] {
            return Err(Error::shape("cholesky", format!("expected square matrix, got {:?}", av.shape())));
        }
        let n = av.shape()[0];
        let l = linalg::cholesky_factor(av.data(), n)?;
        self.graph().push(Tensor::new(&[n, n], l)?, Op::Cholesky { a: self.id }, self.needs())
    }

    /// Solve op(self) X = b where self is lower-triangular; `transpose`
    /// solves against the upper factor self^T.
    pub fn tri_solve(&self, b: &Var, transpose: bool) -> Result<Var> {
        self.same_tape(b, "triangular_solve")?;
        let lv = self.value();
        let bv = b.value();
        if lv.rank() != 2 || lv.shape()[0] != lv.shape()[1] {
            return Err(Error::shape("triangular_solve", format!("expected square L, got {:?}", lv.shape())));
        }
        let n = lv.shape()[0];
        if bv.shape().first() != Some(&n) {
            return Err(Error::shape(
                "triangular_solve",
                format!("rhs shape {:?} incompatible with L {:?}", bv.shape(), lv.shape()),
            ));
        }
        let ncols = bv.numel() / n;
        let mut x = bv.data().to_vec();
        linalg::solve_triangular(lv.data(), n, &mut x, ncols, transpose)?;
        self.graph().push(
            Tensor::new(bv.shape(), x)?,
            Op::TriSolve { l: self.id, b: b.id, transpose },
            self.needs() || b.needs(),
        )
    }

    fn reduce(&self, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let xv = self.value();
        if let Some(a) = axis {
            if a >= xv.rank() {
                return Err(Error::shape("reduce", format!("axis {} out of range for {:?}", a, xv.shape())));
            }
        }
        let (value, arg) = reduce_forward(kind, &xv, axis);
        self.graph().push(value, Op::Reduce { kind, x: self.id, axis, arg }, self.needs())
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Sum, axis)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Mean, axis)
    }

    /// Max reduction; ties route the gradient to the first (lowest flat
    /// index) maximizer.
    pub fn max(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Max, axis)
    }

    pub fn prod(&self, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Prod, axis)
    }

    /// NHWC stride-1 convolution: self [B,H,W,Cin], w [kh,kw,Cin,Cout],
    /// bias [Cout].
    pub fn conv2d(&self, w: &Var, bias: &Var, pad: Padding) -> Result<Var> {
        self.same_tape(w, "conv2d")?;
        self.same_tape(bias, "conv2d")?;
        let xv = self.value();
        let wv = w.value();
        let bv = bias.value();
        if xv.rank() != 4 || wv.rank() != 4 {
            return Err(Error::shape("conv2d", format!("need rank-4 x and w, got {:?}, {:?}", xv.shape(), wv.shape())));
        }
        if xv.shape()[3] != wv.shape()[2] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} != weight channels {}", xv.shape()[3], wv.shape()[2]),
            ));
        }
        if bv.shape() != [wv.shape()[3]] {
            return Err(Error::shape("conv2d", format!("bias shape {:?} != [{}]", bv.shape(), wv.shape()[3])));
        }
        let dims = ConvDims {
            batch: xv.shape()[0],
            h: xv.shape()[1],
            w: xv.shape()[2],
            cin: xv.shape()[3],
            kh: wv.shape()[0],
            kw: wv.shape()[1],
            cout: wv.shape()[3],
            pad,
        };
        if dims.pad == Padding::Valid && (dims.kh > dims.h || dims.kw > dims.w) {
            return Err(Error::shape("conv2d", format!("kernel {}x{} larger than input {}x{}", dims.kh, dims.kw, dims.h, dims.w)));
        }
        let out = linalg::conv2d_forward(&dims, xv.data(), wv.data(), bv.data());
        let (ho, wo) = dims.out_hw();
        self.graph().push(
            Tensor::new(&[dims.batch, ho, wo, dims.cout], out)?,
            Op::Conv2d { x: self.id, w: w.id, bias: bias.id, dims },
            self.needs() || w.needs() || bias.needs(),
        )
    }

    /// 2x2/stride-2 max pooling over NHWC input.
    pub fn maxpool2d(&self, pad: Padding) -> Result<Var> {
        let xv = self.value();
        if xv.rank() != 4 {
            return Err(Error::shape("maxpool2d", format!("need rank-4 input, got {:?}", xv.shape())));
        }
        let (b, h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (out, arg, ho, wo) = linalg::maxpool2d_forward(b, h, w, c, pad, xv.data());
        self.graph().push(
            Tensor::new(&[b, ho, wo, c], out)?,
            Op::MaxPool2d { x: self.id, arg, x_len: xv.numel() },
            self.needs(),
        )
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var> {
        let xv = self.value();
        if xv.rank() == 0 {
            return Err(Error::shape("log_softmax", "rank-0 input".to_string()));
        }
        let c = *xv.shape().last().unwrap();
        let mut out = vec![0.0; xv.numel()];
        for (orow, xrow) in out.chunks_exact_mut(c).zip(xv.data().chunks_exact(c)) {
            let m = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + xrow.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                orow[j] = xrow[j] - lse;
            }
        }
        self.graph().push(Tensor::new(xv.shape(), out)?, Op::LogSoftmax { x: self.id }, self.needs())
    }

    /// Pick one element per row: self [B, C], idx[b] < C, result [B].
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let xv = self.value();
        if xv.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("need rank-2 input, got {:?}", xv.shape())));
        }
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        if idx.len() != b {
            return Err(Error::shape("gather_rows", format!("{} indices for {} rows", idx.len(), b)));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::InvalidArg(format!("gather_rows: index {} out of range for {} columns", bad, c)));
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(row, &col)| xv.data()[row * c + col]).collect();
        self.graph().push(Tensor::from_vec(data), Op::GatherRows { x: self.id, idx: idx.to_vec() }, self.needs())
    }

    /// Column subset of a [B, C] matrix (used for max-over-other-classes).
    pub fn select_cols(&self, cols: &[usize]) -> Result<Var> {
        let xv = self.value();
        if xv.rank() != 2 {
            return Err(Error::shape("select_cols", format!("need rank-2 input, got {:?}", xv.shape())));
        }
        let (b, c) = (xv.shape()[0], xv.shape()[1]);
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::InvalidArg(format!("select_cols: column {} out of range for {}", bad, c)));
        }
        let k = cols.len();
        let mut data = vec![0.0; b * k];
        for row in 0..b {
            for (j, &col) in cols.iter().enumerate() {
                data[row * k + j] = xv.data()[row * c + col];
            }
        }
        self.graph().push(Tensor::new(&[b, k], data)?, Op::SelectCols { x: self.id, cols: cols.to_vec() }, self.needs())
    }

    /// Embed a vector [n] as the diagonal of an [n, n] matrix.
    pub fn diag_embed(&self) -> Result<Var> {
        let xv = self.value();
        if xv.rank() != 1 {
            return Err(Error::shape("diag_embed", format!("need rank-1 input, got {:?}", xv.shape())));
        }
        let n = xv.shape()[0];
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = xv.data()[i];
        }
        self.graph().push(t, Op::DiagEmbed { x: self.id }, self.needs())
    }

    /// Inverted dropout: keeps with probability 1-rate and rescales by
    /// 1/(1-rate). Eval mode is the caller simply not emitting this op.
    pub fn dropout<R: rand::Rng>(&self, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArg(format!("dropout rate {} outside [0, 1)", rate)));
        }
        let xv = self.value();
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..xv.numel()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale }).collect();
        let mut value = xv.clone();
        for (v, &m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.graph().push(value, Op::Dropout { x: self.id, mask }, self.needs())
    }
}

fn reduce_forward(kind: ReduceKind, xv: &Tensor, axis: Option<usize>) -> (Tensor, Vec<u32>) {
    match axis {
        None => {
            let d = xv.data();
            match kind {
                ReduceKind::Sum => (Tensor::scalar(d.iter().sum()), Vec::new()),
                ReduceKind::Mean => (Tensor::scalar(d.iter().sum::<f64>() / d.len() as f64), Vec::new()),
                ReduceKind::Prod => (Tensor::scalar(d.iter().product()), Vec::new()),
                ReduceKind::Max => {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0u32;
                    for (i, &v) in d.iter().enumerate() {
                        if v > best {
                            best = v;
                            arg = i as u32;
                        }
                    }
                    (Tensor::scalar(best), vec![arg])
                }
            }
        }
        Some(a) => {
            let (outer, mid, inner) = axis_split(xv.shape(), a);
            let mut shape: Vec<usize> = xv.shape().to_vec();
            shape.remove(a);
            let mut out = Tensor::zeros(&shape);
            let d = xv.data();
            let od = out.data_mut();
            let mut arg = Vec::new();
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                od[o * inner + i] += d[(o * mid + m) * inner + i];
                            }
                        }
                    }
                    if kind == ReduceKind::Mean {
                        for v in od.iter_mut() {
                            *v /= mid as f64;
                        }
                    }
                }
                ReduceKind::Prod => {
                    od.fill(1.0);
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                od[o * inner + i] *= d[(o * mid + m) * inner + i];
                            }
                        }
                    }
                }
                ReduceKind::Max => {
                    arg = vec![0u32; outer * inner];
                    od.fill(f64::NEG_INFINITY);
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                let v = d[(o * mid + m) * inner + i];
                                if v > od[o * inner + i] {
                                    od[o * inner + i] = v;
                                    arg[o * inner + i] = ((o * mid + m) * inner + i) as u32;
                                }
                            }
                        }
                    }
                }
            }
            (out, arg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with(vals: &[(&[usize], Vec<f64>)]) -> (Graph, Vec<Var>) {
        let g = Graph::new();
        let vars = vals.iter().map(|(s, d)| g.var(Tensor::new(s, d.clone()).unwrap()).unwrap()).collect();
        (g, vars)
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // y = x*x + x  => dy/dx = 2x + 1
        let (g, vars) = graph_with(&[(&[2], vec![3.0, -1.5])]);
        let x = &vars[0];
        let y = x.mul(x).unwrap().add(x).unwrap().sum(None).unwrap();
        let grads = g.backward(&y).unwrap();
        let gx = grads.wrt(x).unwrap();
        assert_eq!(gx.data(), &[7.0, -2.0]);
    }

    #[test]
    fn constants_do_not_get_gradients() {
        let g = Graph::new();
        let x = g.var(Tensor::from_vec(vec![2.0])).unwrap();
        let c = g.constant(Tensor::from_vec(vec![5.0])).unwrap();
        let y = x.mul(&c).unwrap().sum(None).unwrap();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[5.0]);
        assert!(grads.wrt(&c).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (g, vars) = graph_with(&[(&[3], vec![1.0, 2.0, 3.0])]);
        assert!(matches!(g.backward(&vars[0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn nan_forward_fails_fast_with_op_name() {
        let (_g, vars) = graph_with(&[(&[1], vec![-1.0])]);
        match vars[0].log() {
            Err(Error::NotFinite { op }) => assert_eq!(op, "log"),
            other => panic!("expected NotFinite, got {:?}", other.map(|_| ())),
        }
        match vars[0].sqrt() {
            Err(Error::NotFinite { op }) => assert_eq!(op, "sqrt"),
            other => panic!("expected NotFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn div_by_zero_is_an_error() {
        let (_g, vars) = graph_with(&[(&[1], vec![1.0]), (&[1], vec![0.0])]);
        assert!(matches!(vars[0].div(&vars[1]), Err(Error::NotFinite { .. })));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let (_g, vars) = graph_with(&[(&[2, 3], vec![0.0; 6]), (&[2, 3], vec![0.0; 6])]);
        assert!(matches!(vars[0].matmul(&vars[1]), Err(Error::Shape { .. })));
    }

    #[test]
    fn max_tie_routes_to_first_index() {
        let (g, vars) = graph_with(&[(&[4], vec![1.0, 7.0, 7.0, 2.0])]);
        let y = vars[0].max(None).unwrap();
        assert_eq!(y.value().item().unwrap(), 7.0);
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.wrt(&vars[0]).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn prod_gradient_handles_zeros() {
        let (g, vars) = graph_with(&[(&[3], vec![2.0, 0.0, 5.0])]);
        let y = vars[0].prod(None).unwrap();
        assert_eq!(y.value().item().unwrap(), 0.0);
        let grads = g.backward(&y).unwrap();
        // d/dx_i = prod of the others
        assert_eq!(grads.wrt(&vars[0]).unwrap().data(), &[0.0, 10.0, 0.0]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let (g, vars) = graph_with(&[(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0])]);
        let y = vars[0].log_softmax().unwrap();
        for row in y.value().data().chunks_exact(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // gradient of sum(log_softmax) w.r.t. x sums to zero per row
        let loss = y.sum(None).unwrap();
        let grads = g.backward(&loss).unwrap();
        for row in grads.wrt(&vars[0]).unwrap().data().chunks_exact(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn backward_deterministic_bitwise() {
        let run = || -> Vec<f64> {
            let g = Graph::new();
            let x = g.var(Tensor::new(&[3, 3], (0..9).map(|i| (i as f64) * 0.37 - 1.1).collect()).unwrap()).unwrap();
            let w = g.var(Tensor::new(&[3, 3], (0..9).map(|i| ((i * 5 % 7) as f64) * 0.21 - 0.4).collect()).unwrap()).unwrap();
            let y = x.matmul(&w).unwrap().tanh().unwrap().square().unwrap().mean(None).unwrap();
            let grads = g.backward(&y).unwrap();
            let mut out = grads.wrt(&x).unwrap().data().to_vec();
            out.extend_from_slice(grads.wrt(&w).unwrap().data());
            out
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn dropout_masks_and_scales() {
        use rand::SeedableRng;
        let g = Graph::new();
        let x = g.var(Tensor::full(&[1000], 1.0)).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let y = x.dropout(0.5, &mut rng).unwrap();
        let kept = y.value().data().iter().filter(|&&v| v != 0.0).count();
        assert!(y.value().data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!((kept as f64 - 500.0).abs() < 80.0);
        let loss = y.sum(None).unwrap();
        let grads = g.backward(&loss).unwrap();
        // gradient equals the mask
        assert_eq!(grads.wrt(&x).unwrap().data(), y.value().data());
    }
}
