//! Reverse-mode automatic differentiation over a linear (Wengert) tape.
//!
//! Every operation appends a node whose parents already live on the tape, so
//! node order is a topological order and `backward` is a single reverse sweep.
//! Values are stored per node; the backward rule of each op reads whatever it
//! needs from its parents' values and its own output.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::nn::conv::{ConvSpec, UpConvSpec};
use crate::nn::deform::DeformSpec;
use crate::nn::interp::ResizeSpec;
use crate::nn::loss::CrossEntropySaved;
use crate::nn::norm::{LayerNormSaved, SoftmaxSpec};
use crate::tensor::{lit, Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        /// `b` holds a single element broadcast over `a`.
        scalar_b: bool,
    },
    Scale(Var, T),
    Gelu(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    Transpose2d(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
        mean: bool,
    },
    SumAll(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: LayerNormSaved<T>,
    },
    Softmax {
        x: Var,
        spec: SoftmaxSpec,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    UpConv2x2 {
        x: Var,
        w: Var,
        b: Var,
        spec: UpConvSpec,
    },
    Resize {
        x: Var,
        spec: ResizeSpec,
    },
    Sample {
        x: Var,
        points: Var,
        cells: Option<Vec<i64>>,
    },
    Deform {
        value: Var,
        offsets: Var,
        weights: Var,
        spec: Box<DeformSpec>,
    },
    CrossEntropy {
        logits: Var,
        saved: CrossEntropySaved<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            },
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Reshape(_) => "reshape",
            Op::Transpose2d(_) => "transpose2d",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAxis { mean: false, .. } => "sum",
            Op::SumAxis { mean: true, .. } => "mean",
            Op::SumAll(_) => "sum_all",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::UpConv2x2 { .. } => "up_conv2x2",
            Op::Resize { .. } => "bilinear_resize",
            Op::Sample { .. } => "bilinear_sample",
            Op::Deform { .. } => "ms_deform_sample",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-owner recording of one forward computation.
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    grads: HashMap<usize, Tensor<T>>,
    check_finite: bool,
    pinned: Option<PinnedCells>,
}

#[derive(Debug)]
struct PinnedCells {
    cells: Vec<i64>,
    cursor: usize,
    crossings: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that validates every op output and fails on NaN/Inf.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: HashMap::new(),
            check_finite: true,
            pinned: None,
        }
    }

    /// Tape without per-op finiteness checks (training).
    pub fn unchecked() -> Self {
        let mut t = Self::new();
        t.check_finite = false;
        t
    }

    pub fn checks_finite(&self) -> bool {
        self.check_finite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input: gradients are accumulated for it by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    /// Value of a node. Panics if `v` was produced by a different tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.index].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.value(v).dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar { index: v.index });
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.index].requires_grad);
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index,
        })
    }

    /// Makes later bilinear samples use these cells, in the order
    /// [`Tape::sample_cells`] lists them, instead of the cells their points
    /// fall in. Evaluations then stay on one smooth piece of the sampler.
    pub fn pin_cells(&mut self, cells: Vec<i64>) {
        self.pinned = Some(PinnedCells {
            cells,
            cursor: 0,
            crossings: 0,
        });
    }

    /// Number of pinned cell coordinates that differed from the natural ones.
    pub fn pinned_crossings(&self) -> usize {
        self.pinned.as_ref().map_or(0, |p| p.crossings)
    }

    pub(crate) fn has_pinned(&self) -> bool {
        self.pinned.is_some()
    }

    pub(crate) fn take_pinned(&mut self, natural: &[i64]) -> Result<Option<Vec<i64>>> {
        let Some(p) = self.pinned.as_mut() else {
            return Ok(None);
        };
        let end = p.cursor + natural.len();
        if end > p.cells.len() {
            return Err(Error::invalid("pin_cells", "more sample points than pinned cells"));
        }
        let cells = p.cells[p.cursor..end].to_vec();
        p.crossings += cells.iter().zip(natural).filter(|(a, b)| a != b).count();
        p.cursor = end;
        Ok(Some(cells))
    }

    /// Integer cells `⌊x⌋, ⌊y⌋` used by every bilinear sample point on the
    /// tape. Sampling is smooth only within a cell.
    pub fn sample_cells(&self) -> Vec<i64> {
        let mut cells = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Sample { points, cells: pinned, .. } => match pinned {
                    Some(c) => cells.extend_from_slice(c),
                    None => {
                        let pts = self.nodes[points.index].value.data();
                        cells.extend(pts.iter().map(|c| c.floor().to_f64() as i64));
                    }
                },
                Op::Deform { offsets, spec, .. } => {
                    spec.cells(self.nodes[offsets.index].value.data(), &mut cells);
                }
                _ => {}
            }
        }
        cells
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(&v.index)
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    /// Reverse sweep from a scalar `loss`. Gradients of trainable leaves are
    /// added to any gradients left by earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let loss_dims = self.dims(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_dims.to_vec()));
        }
        let mut pending: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.index + 1);
        pending.resize_with(loss.index + 1, || None);
        pending[loss.index] = Some(vec![T::one()]);

        for i in (0..=loss.index).rev() {
            let Some(g) = pending[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.grads.get_mut(&i) {
                    Some(acc) => acc.accumulate(&g),
                    None => {
                        let t = Tensor::new(node.value.dims(), g)?;
                        self.grads.insert(i, t);
                    }
                }
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                pending: &mut pending,
            };
            backward_node(&self.nodes, i, &g, &mut sink);
        }
        Ok(())
    }
}

/// Collects gradient contributions for parents during one backward step.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    pending: &'a mut Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradSink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Adds `g` into the pending gradient of `v`.
    pub(crate) fn add(&mut self, v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.pending[v.index] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds into the pending gradient of `v` through a closure over a zeroed
    /// or existing buffer, avoiding a temporary for scatter-style rules.
    pub(crate) fn add_with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let len = self.nodes[v.index].value.len();
        let slot = &mut self.pending[v.index];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], sink: &mut GradSink<'_, T>) {
    let val = |v: Var| &nodes[v.index].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::Binary {
            kind,
            a,
            b,
            scalar_b,
        } => {
            let av = val(a).data();
            let bv = val(b).data();
            if sink.wants(a) {
                let ga = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                    BinaryKind::Mul if scalar_b => g.iter().map(|&gi| gi * bv[0]).collect(),
                    BinaryKind::Mul => g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect(),
                };
                sink.add(a, ga);
            }
            if sink.wants(b) {
                let gb: Vec<T> = match kind {
                    BinaryKind::Add => g.to_vec(),
                    BinaryKind::Sub => g.iter().map(|&gi| -gi).collect(),
                    BinaryKind::Mul if scalar_b => g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect(),
                    BinaryKind::Mul => g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect(),
                };
                if scalar_b {
                    sink.add(b, vec![gb.into_iter().sum()]);
                } else {
                    sink.add(b, gb);
                }
            }
        }
        &Op::Scale(x, c) => sink.add(x, g.iter().map(|&gi| gi * c).collect()),
        &Op::Gelu(x) => {
            let gx = g
                .iter()
                .zip(val(x).data())
                .map(|(&gi, &xi)| gi * gelu_grad(xi))
                .collect();
            sink.add(x, gx);
        }
        &Op::MatMul(a, b) => {
            let (m, k) = (val(a).dims()[0], val(a).dims()[1]);
            let n = val(b).dims()[1];
            if sink.wants(a) {
                // ga = g · bᵀ
                sink.add(a, matmul_nt(g, val(b).data(), m, n, k));
            }
            if sink.wants(b) {
                // gb = aᵀ · g
                sink.add(b, matmul_tn(val(a).data(), g, m, k, n));
            }
        }
        &Op::Linear { x, w, b } => {
            let (n, fin) = (val(x).dims()[0], val(x).dims()[1]);
            let fout = val(w).dims()[0];
            if sink.wants(x) {
                sink.add(x, matmul_nn(g, val(w).data(), n, fout, fin));
            }
            if sink.wants(w) {
                sink.add(w, matmul_tn(g, val(x).data(), n, fout, fin));
            }
            if let Some(b) = b {
                if sink.wants(b) {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.chunks_exact(fout) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    sink.add(b, gb);
                }
            }
        }
        &Op::Reshape(x) => sink.add(x, g.to_vec()),
        &Op::Transpose2d(x) => {
            let (r, c) = (val(x).dims()[0], val(x).dims()[1]);
            // output is [c × r]
            sink.add(x, transpose(g, c, r));
        }
        Op::Concat { parts, axis } => {
            let axis = *axis;
            let (outer, total, inner) = split_at_axis(out.dims(), axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).dims()[axis];
                if sink.wants(p) {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    sink.add(p, gp);
                }
                offset += len;
            }
        }
        &Op::Slice { x, axis, start } => {
            let (outer, total, inner) = split_at_axis(val(x).dims(), axis);
            let len = out.dims()[axis];
            sink.add_with(x, |gx| {
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    for (d, &s) in gx[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&g[src..src + len * inner])
                    {
                        *d += s;
                    }
                }
            });
        }
        &Op::SumAxis { x, axis, mean } => {
            let (outer, n, inner) = split_at_axis(val(x).dims(), axis);
            let scale = if mean { lit::<T>(1.0 / n as f64) } else { T::one() };
            let mut gx = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..n {
                    gx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                }
            }
            sink.add(x, gx);
        }
        &Op::SumAll(x) => sink.add(x, vec![g[0]; val(x).len()]),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            saved,
        } => crate::nn::norm::layer_norm_backward(*x, *gamma, *beta, saved, val(*gamma).data(), g, sink),
        Op::Softmax { x, spec } => spec.backward(*x, out.data(), g, sink),
        Op::Conv2d { x, w, b, spec } => spec.backward(*x, *w, *b, val(*x).data(), val(*w).data(), g, sink),
        Op::UpConv2x2 { x, w, b, spec } => {
            spec.backward(*x, *w, *b, val(*x).data(), val(*w).data(), g, sink)
        }
        Op::Resize { x, spec } => spec.backward(*x, g, sink),
        Op::Sample { x, points, cells } => crate::nn::interp::sample_backward(
            *x,
            *points,
            val(*x),
            val(*points).data(),
            cells.as_deref(),
            g,
            sink,
        ),
        Op::Deform {
            value,
            offsets,
            weights,
            spec,
        } => spec.backward(
            *value,
            *offsets,
            *weights,
            val(*value).data(),
            val(*offsets).data(),
            val(*weights).data(),
            g,
            sink,
        ),
        Op::CrossEntropy { logits, saved } => saved.backward(*logits, g[0], sink),
    }
}

// Elementwise, linear-algebra, shape and reduction ops.
impl<T: Scalar> Tape<T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let scalar_b = bv.len() == 1 && av.len() != 1;
        if !scalar_b && av.dims() != bv.dims() {
            return Err(Error::shape(
                match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                },
                av.dims(),
                bv.dims(),
            ));
        }
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<T> = if scalar_b {
            let s = bv.data()[0];
            av.data().iter().map(|&x| f(x, s)).collect()
        } else {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        };
        let value = Tensor::new(av.dims(), data)?;
        self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                scalar_b,
            },
            &[a, b],
        )
    }

    /// `a + b`; `b` may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let c = lit::<T>(c);
        let xv = self.value(x);
        let value = Tensor::new(xv.dims(), xv.data().iter().map(|&v| v * c).collect())?;
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let value = Tensor::new(xv.dims(), xv.data().iter().map(|&v| gelu(v)).collect())?;
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::shape("matmul", ad, bd));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], data)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `x · wᵀ + b` with `x: [n × in]`, `w: [out × in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (xd, wd) = (self.dims(x), self.dims(w));
        if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[1] {
            return Err(Error::shape("linear", &[xd[0], wd.get(1).copied().unwrap_or(0)], xd));
        }
        let (n, fin, fout) = (xd[0], xd[1], wd[0]);
        let mut data = matmul_nt(self.value(x).data(), self.value(w).data(), n, fin, fout);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            self.check(b)?;
            if self.dims(b) != [fout] {
                return Err(Error::shape("linear", &[fout], self.dims(b)));
            }
            let bv = self.value(b).data();
            for row in data.chunks_exact_mut(fout) {
                for (r, &bb) in row.iter_mut().zip(bv) {
                    *r += bb;
                }
            }
            parents.push(b);
        }
        let value = Tensor::new(&[n, fout], data)?;
        self.push(value, Op::Linear { x, w, b }, &parents)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshaped(dims)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let d = self.dims(x);
        if d.len() != 2 {
            return Err(Error::invalid("transpose2d", format!("needs rank 2, got {d:?}")));
        }
        let (r, c) = (d[0], d[1]);
        let value = Tensor::new(&[c, r], transpose(self.value(x).data(), r, c))?;
        self.push(value, Op::Transpose2d(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        for &p in parts {
            self.check(p)?;
        }
        let base = self.dims(first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            let compatible = d.len() == base.len()
                && d.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, d));
            }
            total += d[axis];
        }
        let mut dims = base.clone();
        dims[axis] = total;
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(dims.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.dims(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&dims, data)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// `len` entries of `x` along `axis`, starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let d = self.dims(x).to_vec();
        if axis >= d.len() || len == 0 || start + len > d[axis] {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {d:?}", start + len),
            ));
        }
        let (outer, total, inner) = split_at_axis(&d, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * total + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut dims = d;
        dims[axis] = len;
        let value = Tensor::new(&dims, data)?;
        self.push(value, Op::Slice { x, axis, start }, &[x])
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        self.check(x)?;
        let d = self.dims(x);
        if axis >= d.len() || sizes.iter().sum::<usize>() != d[axis] {
            return Err(Error::invalid(
                "split",
                format!("sizes {sizes:?} do not cover axis {axis} of {d:?}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check(x)?;
        let d = self.dims(x).to_vec();
        if axis >= d.len() {
            return Err(Error::invalid(
                if mean { "mean" } else { "sum" },
                format!("axis {axis} out of range for {d:?}"),
            ));
        }
        let (outer, n, inner) = split_at_axis(&d, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let row = &src[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (acc, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let s = lit::<T>(1.0 / n as f64);
            data.iter_mut().for_each(|v| *v *= s);
        }
        let mut dims: Vec<usize> = d.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &v)| v).collect();
        if dims.is_empty() {
            dims.push(1);
        }
        let value = Tensor::new(&dims, data)?;
        self.push(value, Op::SumAxis { x, axis, mean }, &[x])
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = lit::<T>(0.5);
    let inner = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = lit::<T>(0.5);
    let inner = lit::<T>(GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = lit::<T>(GELU_C) * (T::one() + lit::<T>(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// `(outer, axis_len, inner)` for a row-major layout.
pub(crate) fn split_at_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// `a[m×k] · b[k×n]`
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`, a `[k×n]` result.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            out.push(x[r * cols + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims, v).unwrap()
    }

    #[test]
    fn add_and_mul_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4., 6.]);
        let zero = tape.constant(Tensor::scalar(0.0));
        let z = tape.mul(a, zero).unwrap();
        assert_eq!(tape.value(z).data(), &[0., 0.]);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[3], &[1., 2., 3.]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let m = tape.constant(t(&[2, 3], &[0.; 6]));
        assert!(tape.matmul(m, m).is_err());
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);
        let r = tape.constant(t(&[1, 2], &[1., 2.]));
        let c = tape.constant(t(&[2, 1], &[3., 4.]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[11.]);
    }

    #[test]
    fn sum_and_mean() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        let s = tape.sum(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[6.]);
        let c = tape.constant(Tensor::full(&[2, 5], 2.5));
        let m = tape.mean(c, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[2.5, 2.5]);
        assert!(tape.sum(c, 2).is_err());
    }

    #[test]
    fn grad_of_sum_is_ones_and_of_square_is_twice() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 1.]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[0.5, -1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., -2., 4.]);
    }

    #[test]
    fn two_paths_sum_and_repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 2.]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4., 4.]);
        tape.clear_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let mut other = Tape::<f64>::new();
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::ForeignVar { .. })));
    }

    #[test]
    fn non_finite_outputs_are_reported_by_op() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1], &[f64::MAX]));
        let err = tape.add(a, a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "add" }));
        let mut quiet = Tape::<f64>::unchecked();
        let a = quiet.constant(t(&[1], &[f64::MAX]));
        assert!(quiet.add(a, a).is_ok());
    }

    #[test]
    fn concat_split_and_reshape_round_trip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let parts = tape.split(x, 2, &[1, 3]).unwrap();
        let back = tape.concat(&parts, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let r = tape.reshape(x, &[6, 4]).unwrap();
        let r = tape.reshape(r, &[2, 3, 4]).unwrap();
        assert_eq!(tape.value(r), tape.value(x));
        assert!(tape.split(x, 1, &[1, 1]).is_err());
    }

    #[test]
    fn level_token_concat_length() {
        // 64×64 input: 8×8, 4×4 and 2×2 levels.
        let mut tape = Tape::<f64>::new();
        let levels: Vec<Var> = [64usize, 16, 4]
            .iter()
            .map(|&n| tape.constant(Tensor::zeros(&[n, 3])))
            .collect();
        let all = tape.concat(&levels, 0).unwrap();
        assert_eq!(tape.dims(all), &[84, 3]);
    }
}
