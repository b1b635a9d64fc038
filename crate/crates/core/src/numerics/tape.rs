//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is the computation record: every primitive applied to a
//! [`Var`] that depends on a differentiable leaf is appended as a node that
//! remembers its parents and whatever it needs for the backward rule. Node
//! ids are assigned in creation order, so walking them in reverse visits
//! each node after all of its consumers.
//!
//! Values that do not depend on any differentiable leaf are never
//! recorded, and a tape built with [`Tape::inference`] records nothing at
//! all, so the same model code serves training and inference.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

/// The computation record for one forward/backward pass.
///
/// A tape is confined to a single thread; independent passes use
/// independent tapes and may share parameter tensors read-only.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<BTreeMap<usize, Tensor>>,
    record: bool,
}

struct Node {
    op: Op,
    parents: Vec<Option<usize>>,
    shape: Vec<usize>,
}

enum Op {
    Leaf,
    MatMul { a: Tensor, b: Tensor },
    /// `a · bᵀ`
    MatMulT { a: Tensor, b: Tensor },
    Transpose,
    Add { shapes: [Vec<usize>; 2] },
    Sub { shapes: [Vec<usize>; 2] },
    Mul { a: Tensor, b: Tensor },
    Scale(f64),
    Identity,
    AddBias,
    Relu { x: Tensor },
    Sigmoid { y: Tensor },
    Tanh { y: Tensor },
    Exp { y: Tensor },
    Log { x: Tensor },
    Clamp { x: Tensor, lo: f64, hi: f64 },
    Softmax { y: Tensor, axis: usize },
    LogSoftmax { p: Tensor, axis: usize },
    LayerNorm { xhat: Tensor, inv_std: Vec<f64>, gain: Tensor },
    Sum { n: usize },
    SliceCols { start: usize, cols_in: usize },
    ConcatCols { widths: Vec<usize> },
}

/// A tensor value bound to a tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Option<usize>,
    value: Tensor,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records operations for differentiation.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(BTreeMap::new()),
            record: true,
        }
    }

    /// A tape that never records: forward values only.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Binds `value` as a differentiable leaf (`requires_grad`).
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        if !self.record {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            parents: Vec::new(),
            shape: value.shape().to_vec(),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value: value.clone(),
        }
    }

    /// Binds `value` as a constant; no gradient flows into it.
    pub fn constant(&self, value: &Tensor) -> Var<'_> {
        Var {
            tape: self,
            id: None,
            value: value.clone(),
        }
    }

    fn push(&self, op: Op, parents: &[&Var<'_>], value: Tensor) -> Var<'_> {
        let ids: Vec<Option<usize>> = parents.iter().map(|p| p.id).collect();
        if !self.record || ids.iter().all(Option::is_none) {
            return Var {
                tape: self,
                id: None,
                value,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            parents: ids,
            shape: value.shape().to_vec(),
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// Back-propagates from a scalar `loss`, adding d(loss)/d(leaf) into the
    /// gradient of every leaf it reaches. Repeated calls accumulate.
    pub fn backward(&self, loss: &Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss belongs to a different tape".into()));
        }
        if !loss.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let Some(root) = loss.id else {
            return Ok(());
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                match leaf_grads.get_mut(&id) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b),
                    None => {
                        leaf_grads.insert(id, Tensor::from_parts(node.shape.clone(), g));
                    }
                }
                continue;
            }
            let wanted: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let contribs = node.op.backward(&g, &node.shape, &wanted)?;
            for (parent, contrib) in node.parents.iter().zip(contribs) {
                if let (Some(pid), Some(c)) = (parent, contrib) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(c),
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: &Var<'_>) -> Option<Tensor> {
        var.id.and_then(|id| self.leaf_grads.borrow().get(&id).cloned())
    }

    /// Clears all accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(shape_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()))
    }
}

fn binary(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    let n: usize = shape.iter().product();
    let data = match (ad.len(), bd.len()) {
        (x, y) if x == y => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (1, _) => bd.iter().map(|&y| f(ad[0], y)).collect(),
        _ => ad.iter().map(|&x| f(x, bd[0])).collect(),
    };
    debug_assert_eq!(n, Vec::<f64>::len(&data));
    Tensor::from_parts(shape, data)
}

/// Reduces a broadcast gradient back to an operand's shape.
fn unbroadcast(g: &[f64], shape: &[usize]) -> Vec<f64> {
    if shape.iter().product::<usize>() == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

/// Groups of a softmax axis as `(count, len, outer_stride, inner_stride)`.
fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize, usize)> {
    match (shape, axis) {
        ([n], 0) => Ok((1, *n, 0, 1)),
        ([r, c], 1) => Ok((*r, *c, *c, 1)),
        ([r, c], 0) => Ok((*c, *r, 1, *c)),
        _ => Err(shape_err!("axis {axis} invalid for shape {shape:?}")),
    }
}

fn for_each_group(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let (count, len, outer, inner) = axis_layout(shape, axis).expect("validated axis");
    let mut idx = vec![0; len];
    for g in 0..count {
        for (k, slot) in idx.iter_mut().enumerate() {
            *slot = g * outer + k * inner;
        }
        f(&idx);
    }
}

impl Op {
    fn backward(&self, g: &[f64], out_shape: &[usize], wanted: &[bool]) -> Result<Vec<Option<Vec<f64>>>> {
        let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
        Ok(match self {
            Op::Leaf => unreachable!("leaves are handled by the tape"),
            Op::MatMul { a, b } => {
                let (m, k) = a.dims2()?;
                let n = b.cols();
                let ga = want(0).then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, b.data(), true, &mut ga, 0.0);
                    ga
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g, false, &mut gb, 0.0);
                    gb
                });
                vec![ga, gb]
            }
            Op::MatMulT { a, b } => {
                let (m, k) = a.dims2()?;
                let n = b.rows();
                let ga = want(0).then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, b.data(), false, &mut ga, 0.0);
                    ga
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![0.0; n * k];
                    gemm(n, m, k, g, true, a.data(), false, &mut gb, 0.0);
                    gb
                });
                vec![ga, gb]
            }
            Op::Transpose => {
                let (r, c) = (out_shape[0], out_shape[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g[i * c + j];
                    }
                }
                vec![Some(gx)]
            }
            Op::Add { shapes } => vec![
                want(0).then(|| unbroadcast(g, &shapes[0])),
                want(1).then(|| unbroadcast(g, &shapes[1])),
            ],
            Op::Sub { shapes } => vec![
                want(0).then(|| unbroadcast(g, &shapes[0])),
                want(1).then(|| unbroadcast(&g.iter().map(|v| -v).collect::<Vec<_>>(), &shapes[1])),
            ],
            Op::Mul { a, b } => {
                let times = |other: &Tensor| -> Vec<f64> {
                    let od = other.data();
                    if od.len() == 1 {
                        g.iter().map(|v| v * od[0]).collect()
                    } else {
                        g.iter().zip(od).map(|(v, o)| v * o).collect()
                    }
                };
                vec![
                    want(0).then(|| unbroadcast(&times(b), a.shape())),
                    want(1).then(|| unbroadcast(&times(a), b.shape())),
                ]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Op::Identity => vec![Some(g.to_vec())],
            Op::AddBias => {
                let cols = *out_shape.last().unwrap_or(&1);
                let gb = want(1).then(|| {
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                });
                vec![want(0).then(|| g.to_vec()), gb]
            }
            Op::Relu { x } => vec![Some(
                g.iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Sigmoid { y } => vec![Some(g.iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect())],
            Op::Tanh { y } => vec![Some(g.iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect())],
            Op::Exp { y } => vec![Some(g.iter().zip(y.data()).map(|(g, y)| g * y).collect())],
            Op::Log { x } => vec![Some(g.iter().zip(x.data()).map(|(g, x)| g / x).collect())],
            Op::Clamp { x, lo, hi } => vec![Some(
                g.iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Softmax { y, axis } => {
                let yd = y.data();
                let mut gx = vec![0.0; g.len()];
                if let ([_, c], 0) = (y.shape(), *axis) {
                    let c = *c;
                    let mut dot = vec![0.0; c];
                    for (gr, yr) in g.chunks_exact(c).zip(yd.chunks_exact(c)) {
                        for j in 0..c {
                            dot[j] += gr[j] * yr[j];
                        }
                    }
                    for ((o, gr), yr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(yd.chunks_exact(c)) {
                        for j in 0..c {
                            o[j] = yr[j] * (gr[j] - dot[j]);
                        }
                    }
                    return Ok(vec![Some(gx)]);
                }
                for_each_group(y.shape(), *axis, |idx| {
                    let dot: f64 = idx.iter().map(|&i| g[i] * yd[i]).sum();
                    for &i in idx {
                        gx[i] = yd[i] * (g[i] - dot);
                    }
                });
                vec![Some(gx)]
            }
            Op::LogSoftmax { p, axis } => {
                let pd = p.data();
                let mut gx = vec![0.0; g.len()];
                for_each_group(p.shape(), *axis, |idx| {
                    let total: f64 = idx.iter().map(|&i| g[i]).sum();
                    for &i in idx {
                        gx[i] = g[i] - pd[i] * total;
                    }
                });
                vec![Some(gx)]
            }
            Op::LayerNorm { xhat, inv_std, gain } => {
                let d = gain.numel();
                let (xd, gd) = (xhat.data(), gain.data());
                let mut gx = vec![0.0; g.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (r, inv) in inv_std.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    let (gr, xr) = (&g[row.clone()], &xd[row.clone()]);
                    let mut sum_gh = 0.0;
                    let mut sum_ghx = 0.0;
                    for j in 0..d {
                        ggain[j] += gr[j] * xr[j];
                        gbias[j] += gr[j];
                        let gh = gr[j] * gd[j];
                        sum_gh += gh;
                        sum_ghx += gh * xr[j];
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        let gh = gr[j] * gd[j];
                        gx[r * d + j] = inv / dn * (dn * gh - sum_gh - xr[j] * sum_ghx);
                    }
                }
                vec![Some(gx), want(1).then_some(ggain), want(2).then_some(gbias)]
            }
            Op::Sum { n } => vec![Some(vec![g[0]; *n])],
            Op::SliceCols { start, cols_in } => {
                let width = out_shape[1];
                let rows = out_shape[0];
                let mut gx = vec![0.0; rows * cols_in];
                for r in 0..rows {
                    gx[r * cols_in + start..r * cols_in + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                vec![Some(gx)]
            }
            Op::ConcatCols { widths } => {
                let total: usize = widths.iter().sum();
                let rows = out_shape[0];
                let mut offset = 0;
                let mut out = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    out.push(want(i).then(|| {
                        let mut gx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gx.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        gx
                    }));
                    offset += w;
                }
                out
            }
        })
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Whether gradients can flow through this value.
    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        self.value.dims2()
    }

    /// The same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(&self.value)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value.data(), false, other.value.data(), false, &mut out, 0.0);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.tape.push(
            Op::MatMul {
                a: self.value.clone(),
                b: other.value.clone(),
            },
            &[self, other],
            value,
        ))
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(shape_err!("matmul_t {m}x{k} by ({n}x{k2})ᵀ"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value.data(), false, other.value.data(), true, &mut out, 0.0);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.tape.push(
            Op::MatMulT {
                a: self.value.clone(),
                b: other.value.clone(),
            },
            &[self, other],
            value,
        ))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        let value = self.value.transpose()?;
        Ok(self.tape.push(Op::Transpose, &[self], value))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let shape = broadcast_shape(&self.value, &other.value, "add")?;
        let value = binary(&self.value, &other.value, shape, |a, b| a + b);
        let shapes = [self.shape().to_vec(), other.shape().to_vec()];
        Ok(self.tape.push(Op::Add { shapes }, &[self, other], value))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let shape = broadcast_shape(&self.value, &other.value, "sub")?;
        let value = binary(&self.value, &other.value, shape, |a, b| a - b);
        let shapes = [self.shape().to_vec(), other.shape().to_vec()];
        Ok(self.tape.push(Op::Sub { shapes }, &[self, other], value))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let shape = broadcast_shape(&self.value, &other.value, "mul")?;
        let value = binary(&self.value, &other.value, shape, |a, b| a * b);
        Ok(self.tape.push(
            Op::Mul {
                a: self.value.clone(),
                b: other.value.clone(),
            },
            &[self, other],
            value,
        ))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let value = self.value.map(|v| v * c);
        self.tape.push(Op::Scale(c), &[self], value)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let value = self.value.map(|v| v + c);
        self.tape.push(Op::Identity, &[self], value)
    }

    /// Adds `bias` (length = columns) to every row: `X + 1 bᵀ`.
    pub fn add_bias(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (r, c) = self.dims2()?;
        if bias.value.numel() != c {
            return Err(shape_err!("bias of {} for {c} columns", bias.value.numel()));
        }
        let bd = bias.value.data();
        let mut out = self.value.data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bd).for_each(|(a, b)| *a += b);
        }
        let value = Tensor::from_parts(vec![r, c], out);
        Ok(self.tape.push(Op::AddBias, &[self, bias], value))
    }

    pub fn relu(&self) -> Var<'t> {
        let value = self.value.map(|v| v.max(0.0));
        self.tape.push(Op::Relu { x: self.value.clone() }, &[self], value)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let value = self.value.map(sigmoid);
        self.tape.push(Op::Sigmoid { y: value.clone() }, &[self], value)
    }

    pub fn tanh(&self) -> Var<'t> {
        let value = self.value.map(f64::tanh);
        self.tape.push(Op::Tanh { y: value.clone() }, &[self], value)
    }

    pub fn exp(&self) -> Var<'t> {
        let value = self.value.map(f64::exp);
        self.tape.push(Op::Exp { y: value.clone() }, &[self], value)
    }

    /// Natural logarithm; every entry must be positive.
    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let value = self.value.map(f64::ln);
        Ok(self.tape.push(Op::Log { x: self.value.clone() }, &[self], value))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let value = self.value.map(|v| v.clamp(lo, hi));
        self.tape.push(
            Op::Clamp {
                x: self.value.clone(),
                lo,
                hi,
            },
            &[self],
            value,
        )
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        axis_layout(self.shape(), axis)?;
        let value = softmax_tensor(&self.value, axis);
        Ok(self.tape.push(Op::Softmax { y: value.clone(), axis }, &[self], value))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        axis_layout(self.shape(), axis)?;
        let p = softmax_tensor(&self.value, axis);
        let x = self.value.data();
        let mut out = vec![0.0; x.len()];
        for_each_group(self.shape(), axis, |idx| {
            let max = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + idx.iter().map(|&i| (x[i] - max).exp()).sum::<f64>().ln();
            for &i in idx {
                out[i] = x[i] - lse;
            }
        });
        let value = Tensor::from_parts(self.shape().to_vec(), out);
        Ok(self.tape.push(Op::LogSoftmax { p, axis }, &[self], value))
    }

    /// Per-row normalisation to zero mean and unit variance, then `gain` and
    /// `bias` applied per column.
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (r, d) = self.dims2()?;
        if gain.value.numel() != d || bias.value.numel() != d {
            return Err(shape_err!("layer norm over {d} features with gain/bias of {}", gain.value.numel()));
        }
        let x = self.value.data();
        let (gd, bd) = (gain.value.data(), bias.value.data());
        let mut xhat = vec![0.0; r * d];
        let mut out = vec![0.0; r * d];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gd[j] + bd[j];
            }
        }
        let value = Tensor::from_parts(vec![r, d], out);
        let xhat = Tensor::from_parts(vec![r, d], xhat);
        Ok(self.tape.push(
            Op::LayerNorm {
                xhat,
                inv_std,
                gain: gain.value.clone(),
            },
            &[self, gain, bias],
            value,
        ))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let value = Tensor::scalar(self.value.sum());
        self.tape.push(Op::Sum { n: self.value.numel() }, &[self], value)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Var<'t>> {
        let (r, c) = self.dims2()?;
        if start + width > c {
            return Err(shape_err!("columns {start}..{} out of {c}", start + width));
        }
        let x = self.value.data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + width]);
        }
        let value = Tensor::from_parts(vec![r, width], out);
        Ok(self.tape.push(Op::SliceCols { start, cols_in: c }, &[self], value))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let rows = first.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2()?;
            if r != rows {
                return Err(shape_err!("concat rows {r} vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value.data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::from_parts(vec![rows, total], out);
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        Ok(first.tape.push(Op::ConcatCols { widths }, &refs, value))
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Result<Var<'t>> {
        if p <= 0.0 {
            return Ok(self.clone());
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be below 1")));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = self.tape.constant(&Tensor::from_parts(self.shape().to_vec(), mask));
        self.mul(&mask)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax down the columns of a row-major `r × c` matrix, swept row by
/// row so that long rows stay cache friendly.
pub(crate) fn column_softmax(xd: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut max = vec![f64::NEG_INFINITY; c];
    for row in xd.chunks_exact(c) {
        max.iter_mut().zip(row).for_each(|(m, &v)| *m = m.max(v));
    }
    let mut out = vec![0.0; r * c];
    let mut total = vec![0.0; c];
    for (o, row) in out.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
        for j in 0..c {
            o[j] = (row[j] - max[j]).exp();
            total[j] += o[j];
        }
    }
    total.iter_mut().for_each(|t| *t = 1.0 / *t);
    for o in out.chunks_exact_mut(c) {
        o.iter_mut().zip(&total).for_each(|(v, t)| *v *= t);
    }
    out
}

pub(crate) fn softmax_tensor(x: &Tensor, axis: usize) -> Tensor {
    let xd = x.data();
    if let ([r, c], 0) = (x.shape(), axis) {
        return Tensor::from_parts(vec![*r, *c], column_softmax(xd, *r, *c));
    }
    let mut out = vec![0.0; xd.len()];
    for_each_group(x.shape(), axis, |idx| {
        let max = idx.iter().map(|&i| xd[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &i in idx {
            let e = (xd[i] - max).exp();
            out[i] = e;
            total += e;
        }
        for &i in idx {
            out[i] /= total;
        }
    });
    Tensor::from_parts(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let tape = Tape::new();
        let p = tape.param(&t(&[&[1.0, -2.0, 3.0]]));
        let loss = p.sum();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let tape = Tape::new();
        let p = tape.param(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = p.mul(&p).unwrap().sum();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&p).unwrap().data(), &[2.0, 4.0]);
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&p).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(&p).is_none());
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let tape = Tape::new();
        let p = tape.param(&Tensor::ones(vec![2, 2]));
        assert!(matches!(tape.backward(&p), Err(Error::Usage(_))));
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let i = tape.constant(&t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = tape.constant(&t(&[&[1.5, -2.0], &[0.25, 4.0]]));
        assert_eq!(i.matmul(&m).unwrap().value(), m.value());
    }

    #[test]
    fn softmax_basics() {
        let tape = Tape::inference();
        let x = tape.constant(&t(&[&[0.0, 0.0]]));
        assert_eq!(x.softmax(1).unwrap().value().data(), &[0.5, 0.5]);
        let big = tape.constant(&t(&[&[1000.0, 0.0]]));
        let s = big.softmax(1).unwrap();
        assert!((s.value().data()[0] - 1.0).abs() < 1e-12);
        assert!(s.value().data()[1] >= 0.0 && s.value().data()[1] < 1e-300);
        assert!(s.value().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_axis_zero_normalises_columns() {
        let tape = Tape::inference();
        let x = tape.constant(&t(&[&[1.0, 2.0, 3.0], &[0.5, -1.0, 7.0]]));
        let s = x.softmax(0).unwrap();
        for j in 0..3 {
            let col = s.value().get(0, j) + s.value().get(1, j);
            assert!((col - 1.0).abs() < 1e-12);
        }
        assert!(x.softmax(2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::inference();
        let g = tape.constant(&Tensor::ones(vec![2]));
        let b = tape.constant(&Tensor::zeros(vec![2]));
        let x = tape.constant(&t(&[&[1.0, 3.0], &[5.0, 5.0]]));
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        let d = y.value().data();
        // mean 2, population std 1
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
        assert_eq!(&d[2..], &[0.0, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::inference();
        let x = tape.constant(&Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
        let z = tape.constant(&Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().value().item(), 0.5);
        assert!(matches!(x.log(), Err(Error::Domain(_))));
        let far = tape.constant(&Tensor::new(vec![2], vec![-800.0, 800.0]).unwrap());
        let s = far.sigmoid();
        assert!(s.value().data()[0] >= 0.0 && s.value().data()[1] <= 1.0);
    }

    #[test]
    fn scalar_broadcast_only() {
        let tape = Tape::new();
        let a = tape.param(&Tensor::ones(vec![2, 3]));
        let s = tape.param(&Tensor::scalar(2.0));
        let y = a.mul(&s).unwrap().sum();
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad(&s).unwrap().item(), 6.0);
        let row = tape.constant(&Tensor::ones(vec![3]));
        assert!(a.add(&row).is_err());
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let p = tape.param(&Tensor::ones(vec![3, 3]));
        let y = p.matmul(&p).unwrap().relu().sum();
        assert!(tape.is_empty());
        assert!(!y.requires_grad());
        assert_eq!(y.value().item(), 27.0);
    }
}
