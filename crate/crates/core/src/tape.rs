//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`] holding its forward value and
//! the ids of its operands. [`Tape::backward`] walks the nodes in reverse append
//! order, which is a valid reverse topological order because operands always
//! precede their results.
//!
//! Nodes created from [`Tape::constant`] (and everything computed only from
//! constants) do not require a gradient and are skipped during the backward
//! sweep.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Boundary, PadGeom, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sin(usize),
    Cos(usize),
    Sigmoid(usize),
    Silu(usize),
    Relu(usize),
    Step,
    Square(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    MatMul(usize, usize),
    Affine {
        w: usize,
        x: usize,
        b: usize,
    },
    Conv3d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        boundary: Boundary,
    },
    AvgPool2(usize),
    Upsample2(usize),
    Concat(Vec<usize>),
    Softmax0(usize),
    Gather(usize, Rc<Vec<usize>>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    leaves: Vec<bool>,
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of the leaf `var`; zero when `var` is unreachable from the root.
    /// Only leaves keep their adjoints after the backward sweep.
    pub fn wrt(&self, var: Var) -> Tensor {
        assert_eq!(
            var.tape, self.tape,
            "gradient lookup with a foreign variable"
        );
        assert!(
            self.leaves[var.index],
            "gradients are kept for leaf variables only"
        );
        let shape = &self.shapes[var.index];
        match &self.adjoints[var.index] {
            Some(a) => Tensor::new(shape.clone(), a.clone()).expect("adjoint shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_reachable(&self, var: Var) -> bool {
        self.adjoints[var.index].is_some()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, contrib: Vec<f64>) {
    match &mut adj[idx] {
        Some(a) => a.iter_mut().zip(&contrib).for_each(|(x, c)| *x += c),
        slot @ None => *slot = Some(contrib),
    }
}

/// Reduces a full-size contribution onto an operand that was broadcast from a
/// single element.
fn fit(contrib: Vec<f64>, target_len: usize) -> Vec<f64> {
    if contrib.len() == target_len {
        contrib
    } else {
        vec![contrib.iter().sum()]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        let i = self.check(v)?;
        Ok(&self.nodes[i])
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("variable from another tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(value, op(ia, ib), rg))
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(f);
        let rg = self.rg(&[ia]);
        Ok(self.push(value, op(ia), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| k * x, |i| Op::Scale(i, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| x + k, Op::AddScalar)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::sin, Op::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::cos, Op::Cos)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    /// Heaviside step, the derivative of relu. Its own derivative is zero.
    pub fn step(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { 1.0 } else { 0.0 }, |_| Op::Step)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    /// Clamps to `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |x| x.clamp(lo, hi), |i| Op::Clamp(i, lo, hi))
    }

    /// x * sigmoid(x)
    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * sigmoid(x), Op::Silu)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(ia), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.clone().reshape(shape)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(value, Op::Reshape(ia), rg))
    }

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (n, k, m) = matmul_dims("matmul", ta.shape(), tb.shape())?;
        let mut out = vec![0.0; n * m];
        matmul_into(ta.data(), tb.data(), &mut out, n, k, m);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(ia, ib), rg))
    }

    /// `w x + b` with `w: [n, k]`, `x: [k, ...]`, `b: [n]` broadcast across
    /// columns. Trailing axes of `x` are treated as one column axis and kept
    /// in the output shape `[n, ...]`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (iw, ix, ib) = (self.check(w)?, self.check(x)?, self.check(b)?);
        let (tw, tx, tb) = (
            &self.nodes[iw].value,
            &self.nodes[ix].value,
            &self.nodes[ib].value,
        );
        let xs = tx.shape();
        if xs.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: tw.shape().to_vec(),
                rhs: xs.to_vec(),
            });
        }
        let m: usize = xs[1..].iter().product();
        let (n, k, _) = matmul_dims("affine", tw.shape(), &[xs[0], m])?;
        if tb.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "affine bias",
                lhs: tw.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        for (row, &bias) in out.chunks_mut(m).zip(tb.data()) {
            row.fill(bias);
        }
        matmul_into(tw.data(), tx.data(), &mut out, n, k, m);
        let mut shape = vec![n];
        shape.extend_from_slice(&xs[1..]);
        let rg = self.rg(&[iw, ix, ib]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Affine {
                w: iw,
                x: ix,
                b: ib,
            },
            rg,
        ))
    }

    /// Stride-1 3x3x3 convolution (cross-correlation) of a `[c_in, h, w, d]`
    /// volume with a `[c_out, c_in, 3, 3, 3]` kernel, same-size output.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        boundary: Boundary,
    ) -> Result<Var> {
        let (ii, iw) = (self.check(input)?, self.check(weight)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let (ti, tw) = (&self.nodes[ii].value, &self.nodes[iw].value);
        let (c_in, dims) = volume_dims("conv3d", ti.shape())?;
        let ws = tw.shape();
        if ws.len() != 5 || ws[1] != c_in || ws[2..] != [3, 3, 3] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                lhs: ti.shape().to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let c_out = ws[0];
        let vol = dims.iter().product::<usize>();
        let mut out = vec![0.0; c_out * vol];
        if let Some(ib) = ib {
            let tb = &self.nodes[ib].value;
            if tb.numel() != c_out {
                return Err(Error::ShapeMismatch {
                    op: "conv3d bias",
                    lhs: ws.to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            for (ch, &b) in out.chunks_mut(vol).zip(tb.data()) {
                ch.fill(b);
            }
        }
        let geom = PadGeom::new(dims);
        let xp = pad_channels(&geom, ti.data(), c_in, boundary);
        let mut outp = vec![0.0; c_out * geom.len];
        let w = tw.data();
        for_each_block(&geom, |lo, len| {
            for ci in 0..c_in {
                for tap in 0..27 {
                    let src = &xp[shifted(&geom, ci, lo, tap)..][..len];
                    for co in 0..c_out {
                        let wt = w[(co * c_in + ci) * 27 + tap];
                        if wt == 0.0 {
                            continue;
                        }
                        let dst = &mut outp[co * geom.len + lo..][..len];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += wt * s;
                        }
                    }
                }
            }
        });
        for (co, dst) in out.chunks_mut(vol).enumerate() {
            let mut interior = vec![0.0; vol];
            geom.unpad(&outp[co * geom.len..(co + 1) * geom.len], &mut interior);
            for (o, v) in dst.iter_mut().zip(interior) {
                *o += v;
            }
        }
        let mut operands = vec![ii, iw];
        operands.extend(ib);
        let rg = self.rg(&operands);
        let mut shape = vec![c_out];
        shape.extend_from_slice(&dims);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv3d {
                input: ii,
                weight: iw,
                bias: ib,
                boundary,
            },
            rg,
        ))
    }

    /// 2x2x2 average pooling of a `[c, h, w, d]` volume with even extents.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (c, dims) = volume_dims("avg_pool2", t.shape())?;
        if dims.iter().any(|&n| n % 2 != 0) {
            return Err(Error::ShapeMismatch {
                op: "avg_pool2 (extents must be even)",
                lhs: t.shape().to_vec(),
                rhs: vec![2, 2, 2],
            });
        }
        let half = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
        let mut out = vec![0.0; c * half.iter().product::<usize>()];
        let src = t.data();
        for_each_pool_pair(c, dims, |dst, s| out[dst] += 0.125 * src[s]);
        let rg = self.rg(&[ia]);
        Ok(self.push(
            Tensor::new(vec![c, half[0], half[1], half[2]], out)?,
            Op::AvgPool2(ia),
            rg,
        ))
    }

    /// Nearest-neighbour 2x upsampling of a `[c, h, w, d]` volume.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (c, dims) = volume_dims("upsample2", t.shape())?;
        let full = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
        let mut out = vec![0.0; c * full.iter().product::<usize>()];
        let src = t.data();
        for_each_pool_pair(c, full, |coarse, fine| out[fine] = src[coarse]);
        let rg = self.rg(&[ia]);
        Ok(self.push(
            Tensor::new(vec![c, full[0], full[1], full[2]], out)?,
            Op::Upsample2(ia),
            rg,
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let tail = self.nodes[idx[0]].value.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let t = &self.nodes[i].value;
            if t.shape()[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[idx[0]].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(idx), rg))
    }

    /// Softmax across the leading axis, independently at every trailing position.
    pub fn softmax0(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let c = t.shape()[0];
        let m = t.numel() / c;
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for j in 0..m {
            let mx = (0..c)
                .map(|k| x[k * m + j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (x[k * m + j] - mx).exp();
                out[k * m + j] = e;
                z += e;
            }
            for k in 0..c {
                out[k * m + j] /= z;
            }
        }
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::new(t.shape().to_vec(), out)?, Op::Softmax0(ia), rg))
    }

    /// Picks flat indices of `a` into a 1-D tensor.
    pub fn gather(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if indices.is_empty() {
            return Err(Error::invalid("gather with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let rg = self.rg(&[ia]);
        Ok(self.push(Tensor::from_vec(data), Op::Gather(ia, indices), rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.check(root)?;
        let rv = &self.nodes[r].value;
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; r + 1];
        adj[r] = Some(vec![1.0]);
        for i in (0..=r).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(node, &g, &mut adj);
            // intermediate adjoints are released as soon as they are consumed
            if matches!(node.op, Op::Leaf) {
                adj[i] = Some(g);
            }
        }
        let mut shapes: Vec<Vec<usize>> = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        adj.resize(self.nodes.len(), None);
        shapes.truncate(self.nodes.len());
        Ok(Gradients {
            tape: self.id,
            shapes,
            leaves: self
                .nodes
                .iter()
                .map(|n| matches!(n.op, Op::Leaf))
                .collect(),
            adjoints: adj,
        })
    }

    fn val(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn elementwise_binary(
        &self,
        adj: &mut [Option<Vec<f64>>],
        g: &[f64],
        a: usize,
        b: usize,
        da: impl Fn(f64, f64) -> f64,
        db: impl Fn(f64, f64) -> f64,
    ) {
        let (xa, xb) = (self.val(a), self.val(b));
        let n = g.len();
        let at = |x: &[f64], j: usize| if x.len() == 1 { x[0] } else { x[j] };
        if self.wants(a) {
            let c = (0..n).map(|j| g[j] * da(at(xa, j), at(xb, j))).collect();
            accumulate(adj, a, fit(c, xa.len()));
        }
        if self.wants(b) {
            let c = (0..n).map(|j| g[j] * db(at(xa, j), at(xb, j))).collect();
            accumulate(adj, b, fit(c, xb.len()));
        }
    }

    fn elementwise_unary(
        &self,
        adj: &mut [Option<Vec<f64>>],
        g: &[f64],
        a: usize,
        d: impl Fn(f64) -> f64,
    ) {
        if self.wants(a) {
            let c = g
                .iter()
                .zip(self.val(a))
                .map(|(&gi, &x)| gi * d(x))
                .collect();
            accumulate(adj, a, c);
        }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Step => {}
            &Op::Add(a, b) => self.elementwise_binary(adj, g, a, b, |_, _| 1.0, |_, _| 1.0),
            &Op::Sub(a, b) => self.elementwise_binary(adj, g, a, b, |_, _| 1.0, |_, _| -1.0),
            &Op::Mul(a, b) => self.elementwise_binary(adj, g, a, b, |_, y| y, |x, _| x),
            &Op::Div(a, b) => {
                self.elementwise_binary(adj, g, a, b, |_, y| 1.0 / y, |x, y| -x / (y * y))
            }
            &Op::Neg(a) => self.elementwise_unary(adj, g, a, |_| -1.0),
            &Op::Scale(a, k) => self.elementwise_unary(adj, g, a, |_| k),
            &Op::AddScalar(a) => self.elementwise_unary(adj, g, a, |_| 1.0),
            &Op::Sin(a) => self.elementwise_unary(adj, g, a, f64::cos),
            &Op::Cos(a) => self.elementwise_unary(adj, g, a, |x| -x.sin()),
            &Op::Sigmoid(a) => self.elementwise_unary(adj, g, a, |x| {
                let s = sigmoid(x);
                s * (1.0 - s)
            }),
            &Op::Silu(a) => self.elementwise_unary(adj, g, a, |x| {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }),
            &Op::Relu(a) => self.elementwise_unary(adj, g, a, |x| if x > 0.0 { 1.0 } else { 0.0 }),
            &Op::Square(a) => self.elementwise_unary(adj, g, a, |x| 2.0 * x),
            &Op::Clamp(a, lo, hi) => {
                self.elementwise_unary(adj, g, a, |x| if x > lo && x < hi { 1.0 } else { 0.0 })
            }
            &Op::Sum(a) => {
                if self.wants(a) {
                    accumulate(adj, a, vec![g[0]; self.val(a).len()]);
                }
            }
            &Op::Mean(a) => {
                if self.wants(a) {
                    let n = self.val(a).len();
                    accumulate(adj, a, vec![g[0] / n as f64; n]);
                }
            }
            &Op::Reshape(a) => {
                if self.wants(a) {
                    accumulate(adj, a, g.to_vec());
                }
            }
            &Op::MatMul(a, b) => self.matmul_backward(adj, g, a, b),
            &Op::Affine { w, x, b } => {
                self.matmul_backward(adj, g, w, x);
                if self.wants(b) {
                    let m = g.len() / self.val(b).len();
                    accumulate(adj, b, g.chunks(m).map(|row| row.iter().sum()).collect());
                }
            }
            &Op::Conv3d {
                input,
                weight,
                bias,
                boundary,
            } => self.conv3d_backward(adj, g, input, weight, bias, boundary),
            &Op::AvgPool2(a) => {
                if self.wants(a) {
                    let t = &self.nodes[a].value;
                    let (c, dims) =
                        volume_dims("avg_pool2", t.shape()).expect("checked in forward");
                    let mut ga = vec![0.0; t.numel()];
                    for_each_pool_pair(c, dims, |dst, s| ga[s] = 0.125 * g[dst]);
                    accumulate(adj, a, ga);
                }
            }
            &Op::Upsample2(a) => {
                if self.wants(a) {
                    let (c, dims) =
                        volume_dims("upsample2", node.value.shape()).expect("checked in forward");
                    let mut ga = vec![0.0; self.val(a).len()];
                    for_each_pool_pair(c, dims, |coarse, fine| ga[coarse] += g[fine]);
                    accumulate(adj, a, ga);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    if self.wants(p) {
                        accumulate(adj, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            &Op::Softmax0(a) => {
                if self.wants(a) {
                    let p = node.value.data();
                    let c = node.value.shape()[0];
                    let m = p.len() / c;
                    let mut ga = vec![0.0; p.len()];
                    for j in 0..m {
                        let dot: f64 = (0..c).map(|k| g[k * m + j] * p[k * m + j]).sum();
                        for k in 0..c {
                            ga[k * m + j] = p[k * m + j] * (g[k * m + j] - dot);
                        }
                    }
                    accumulate(adj, a, ga);
                }
            }
            Op::Gather(a, indices) => {
                if self.wants(*a) {
                    let mut ga = vec![0.0; self.val(*a).len()];
                    for (&i, &gi) in indices.iter().zip(g) {
                        ga[i] += gi;
                    }
                    accumulate(adj, *a, ga);
                }
            }
        }
    }

    fn matmul_backward(&self, adj: &mut [Option<Vec<f64>>], g: &[f64], a: usize, b: usize) {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        let m = tb.numel() / k;
        let (xa, xb) = (ta.data(), tb.data());
        if self.wants(a) {
            // dA = G B^T
            let mut ga = vec![0.0; n * k];
            for_each_col_block(m, |lo, hi| {
                for i in 0..n {
                    let grow = &g[i * m + lo..i * m + hi];
                    for p in 0..k {
                        ga[i * k + p] += dot(grow, &xb[p * m + lo..p * m + hi]);
                    }
                }
            });
            accumulate(adj, a, ga);
        }
        if self.wants(b) {
            // dB = A^T G
            let mut gb = vec![0.0; k * m];
            for_each_col_block(m, |lo, hi| {
                for i in 0..n {
                    let grow = &g[i * m + lo..i * m + hi];
                    for p in 0..k {
                        let aip = xa[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (o, &gv) in gb[p * m + lo..p * m + hi].iter_mut().zip(grow) {
                            *o += aip * gv;
                        }
                    }
                }
            });
            accumulate(adj, b, gb);
        }
    }

    fn conv3d_backward(
        &self,
        adj: &mut [Option<Vec<f64>>],
        g: &[f64],
        input: usize,
        weight: usize,
        bias: Option<usize>,
        boundary: Boundary,
    ) {
        let (ti, tw) = (&self.nodes[input].value, &self.nodes[weight].value);
        let (c_in, dims) = volume_dims("conv3d", ti.shape()).expect("checked in forward");
        let c_out = tw.shape()[0];
        let vol: usize = dims.iter().product();
        let geom = PadGeom::new(dims);
        let w = tw.data();
        if let Some(b) = bias {
            if self.wants(b) {
                accumulate(adj, b, g.chunks(vol).map(|ch| ch.iter().sum()).collect());
            }
        }
        // output adjoint in padded layout, zero on ghosts
        let gp = pad_channels(&geom, g, c_out, Boundary::Zero);
        if self.wants(weight) {
            let xp = pad_channels(&geom, ti.data(), c_in, boundary);
            let mut gw = vec![0.0; w.len()];
            for_each_block(&geom, |lo, len| {
                for ci in 0..c_in {
                    for tap in 0..27 {
                        let src = &xp[shifted(&geom, ci, lo, tap)..][..len];
                        for co in 0..c_out {
                            let gout = &gp[co * geom.len + lo..][..len];
                            gw[(co * c_in + ci) * 27 + tap] += dot(gout, src);
                        }
                    }
                }
            });
            accumulate(adj, weight, gw);
        }
        if self.wants(input) {
            let mut gxp = vec![0.0; c_in * geom.len];
            for_each_block(&geom, |lo, len| {
                for ci in 0..c_in {
                    for tap in 0..27 {
                        let dst = &mut gxp[shifted(&geom, ci, lo, tap)..][..len];
                        for co in 0..c_out {
                            let wt = w[(co * c_in + ci) * 27 + tap];
                            if wt == 0.0 {
                                continue;
                            }
                            for (o, &gv) in dst.iter_mut().zip(&gp[co * geom.len + lo..][..len]) {
                                *o += wt * gv;
                            }
                        }
                    }
                }
            });
            let mut gi = vec![0.0; c_in * vol];
            for (ci, dst) in gi.chunks_mut(vol).enumerate() {
                geom.fold(&gxp[ci * geom.len..(ci + 1) * geom.len], boundary, dst);
            }
            accumulate(adj, input, gi);
        }
    }
}

const BLOCK: usize = 1024;

/// Splits the padded working range into cache-sized blocks.
fn for_each_block(geom: &PadGeom, mut f: impl FnMut(usize, usize)) {
    let end = geom.start + geom.span;
    let mut lo = geom.start;
    while lo < end {
        let len = BLOCK.min(end - lo);
        f(lo, len);
        lo += len;
    }
}

/// Start of channel `c` read through tap `tap` for padded position `lo`.
#[inline]
fn shifted(geom: &PadGeom, c: usize, lo: usize, tap: usize) -> usize {
    c * geom.len + (lo as isize + geom.tap_offset(tap)) as usize
}

fn pad_channels(geom: &PadGeom, data: &[f64], channels: usize, boundary: Boundary) -> Vec<f64> {
    let vol: usize = geom.dims.iter().product();
    let mut out = vec![0.0; channels * geom.len];
    for (c, dst) in out.chunks_mut(geom.len).enumerate() {
        geom.pad(&data[c * vol..(c + 1) * vol], boundary, dst);
    }
    out
}

/// Dot product with eight independent partial sums.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn matmul_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

const COLS: usize = 512;

/// Visits `[lo, hi)` column blocks of a row-major matrix with `m` columns.
fn for_each_col_block(m: usize, mut f: impl FnMut(usize, usize)) {
    let mut lo = 0;
    while lo < m {
        let hi = (lo + COLS).min(m);
        f(lo, hi);
        lo = hi;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for_each_col_block(m, |lo, hi| {
        for i in 0..n {
            let orow = &mut out[i * m + lo..i * m + hi];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&b[p * m + lo..p * m + hi]) {
                    *o += aip * bv;
                }
            }
        }
    });
}

fn volume_dims(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    Ok((shape[0], [shape[1], shape[2], shape[3]]))
}

/// Visits `(coarse_index, fine_index)` for every fine voxel of a `[c, dims]`
/// volume and its 2x-downsampled parent.
fn for_each_pool_pair(c: usize, fine: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let coarse = [fine[0] / 2, fine[1] / 2, fine[2] / 2];
    let cvol: usize = coarse.iter().product();
    let fvol: usize = fine.iter().product();
    for ch in 0..c {
        for x in 0..fine[0] {
            for y in 0..fine[1] {
                for z in 0..fine[2] {
                    let fi = ch * fvol + (x * fine[1] + y) * fine[2] + z;
                    let ci = ch * cvol + ((x / 2) * coarse[1] + y / 2) * coarse[2] + z / 2;
                    f(ci, fi);
                }
            }
        }
    }
}
