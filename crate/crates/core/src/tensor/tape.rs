//! Operation tape for reverse-mode differentiation.
//!
//! Every forward op appends one node; node indices are therefore already a
//! topological order, and `backward` walks them once in reverse. Gradients
//! accumulate additively when a node feeds several consumers. All ops are
//! deterministic: element sums run in a fixed index order, and the parallel
//! convolution paths partition disjoint output rows so results are
//! bitwise-identical at any thread count.

use rayon::prelude::*;

use super::{real, strides, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    // Gradient never crosses a detach, so no parent link is kept.
    Detach,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: F },
    Square { x: TensorId },
    Sqrt { x: TensorId },
    Relu { x: TensorId },
    Sum { x: TensorId, axes: Vec<usize> },
    Conv1d { input: TensorId, weight: TensorId, bias: TensorId, dilation: usize },
    Reshape { x: TensorId },
    Permute { x: TensorId, perm: Vec<usize> },
    Concat { xs: Vec<TensorId>, axis: usize },
    Slice { x: TensorId, axis: usize, start: usize, len: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records differentiable operations for a single forward/backward pass.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

/// Elementwise work below this size is not worth farming out to rayon.
const PAR_THRESHOLD: usize = 1 << 16;

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a recorded node.
    pub fn value(&self, id: TensorId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node, if populated.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Put a plain tensor on the tape as a leaf.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> TensorId {
        self.leaf(value, false)
    }

    fn binary_shapes(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!(
                "{what}: {sa:?} vs {sb:?} (no implicit broadcasting)"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_shapes(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_shapes(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_shapes(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: TensorId, c: F) -> TensorId {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn square(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).data().iter().map(|&v| v * v).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let rg = self.requires_grad(x);
        self.push(value, Op::Square { x }, rg)
    }

    pub fn sqrt(&mut self, x: TensorId) -> TensorId {
        let data = self.value(x).data().iter().map(|&v| v.sqrt()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let rg = self.requires_grad(x);
        self.push(value, Op::Sqrt { x }, rg)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let zero = F::zero();
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > zero { v } else { zero })
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Value-identical tensor through which no gradient flows.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    /// Sum over the given axes; the reduced axes are removed from the shape.
    pub fn sum(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::InvalidArg(format!(
                    "sum axis {ax} out of range for shape {shape:?}"
                )));
            }
        }
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let mut out = vec![F::zero(); out_shape.iter().product()];
        let map = reduction_map(&shape, &axes);
        for (i, &v) in self.value(x).data().iter().enumerate() {
            out[map.out_index(i)] += v;
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Sum { x, axes }, rg))
    }

    /// Arithmetic mean over the given axes (sum composed with a scale).
    pub fn mean(&mut self, x: TensorId, axes: &[usize]) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        let s = self.sum(x, axes)?;
        let mut count = 1usize;
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        seen.dedup();
        for &ax in &seen {
            count *= shape[ax];
        }
        if count == 0 {
            return Err(Error::InvalidArg("mean over empty axes".into()));
        }
        Ok(self.scale(s, real::<F>(1.0) / real::<F>(count as f64)))
    }

    /// Euclidean norm along one axis: `sqrt(sum(x^2, axis))`.
    pub fn norm2(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let sq = self.square(x);
        let s = self.sum(sq, &[axis])?;
        Ok(self.sqrt(s))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        check_perm(perm, shape.len())?;
        let value = permute_tensor(self.value(x), perm);
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate along an axis; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::InvalidArg("concat of zero tensors".into()));
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidArg(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::Shape(format!(
                    "concat: incompatible shapes {first:?} vs {s:?} along axis {axis}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![F::zero(); out_shape.iter().product()];
        let row = axis_total * inner;
        let mut offset = 0usize;
        for &x in xs {
            let len = self.value(x).shape()[axis];
            let src = self.value(x).data();
            for o in 0..outer {
                let dst_base = o * row + offset * inner;
                let src_base = o * len * inner;
                out[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
            offset += len;
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = xs.iter().any(|&x| self.requires_grad(x));
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous slice `[start, start+len)` along one axis.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArg(format!(
                "slice axis {axis} out of range for shape {shape:?}"
            )));
        }
        if start + len > shape[axis] {
            return Err(Error::InvalidArg(format!(
                "slice [{start}, {}) exceeds axis length {}",
                start + len,
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![F::zero(); outer * len * inner];
        let src = self.value(x).data();
        for o in 0..outer {
            let src_base = (o * shape[axis] + start) * inner;
            let dst_base = o * len * inner;
            out[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(
            value,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            rg,
        ))
    }

    /// Same-length 1-d convolution over `[B, Cin, T]` with an odd kernel and
    /// symmetric zero padding of `dilation * (k-1) / 2`.
    pub fn conv1d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        dilation: usize,
    ) -> Result<TensorId> {
        let ishape = self.value(input).shape().to_vec();
        let wshape = self.value(weight).shape().to_vec();
        let bshape = self.value(bias).shape().to_vec();
        if ishape.len() != 3 || wshape.len() != 3 || bshape.len() != 1 {
            return Err(Error::Shape(format!(
                "conv1d expects input [B,Cin,T], weight [Cout,Cin,k], bias [Cout]; got {ishape:?}, {wshape:?}, {bshape:?}"
            )));
        }
        let cin = ishape[1];
        let (cout, wcin, k) = (wshape[0], wshape[1], wshape[2]);
        if cin != wcin {
            return Err(Error::Shape(format!(
                "conv1d: input has {cin} channels but weight expects {wcin}"
            )));
        }
        if bshape[0] != cout {
            return Err(Error::Shape(format!(
                "conv1d: bias length {} != Cout {cout}",
                bshape[0]
            )));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidArg(format!("conv1d kernel size {k} must be odd")));
        }
        if dilation == 0 {
            return Err(Error::InvalidArg("conv1d dilation must be >= 1".into()));
        }

        let value = conv1d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            dilation,
        );
        let rg = self.requires_grad(input)
            || self.requires_grad(weight)
            || self.requires_grad(bias);
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
            },
            rg,
        ))
    }

    fn accumulate(slot: &mut Option<Vec<F>>, numel: usize, f: impl FnOnce(&mut [F])) {
        let buf = slot.get_or_insert_with(|| vec![F::zero(); numel]);
        f(buf);
    }

    /// Populate gradients of every `requires_grad` node reachable from a
    /// scalar loss. Walks the record in reverse creation order, visiting each
    /// node exactly once; a node feeding several consumers receives the sum
    /// of their contributions.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArg("backward on empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArg(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            // Parents always precede node i, so split to borrow the upstream
            // gradient while mutating parent slots.
            let (lo_grads, hi_grads) = self.grads.split_at_mut(i);
            let gy = hi_grads[0].as_ref().unwrap();
            let nodes = &self.nodes;
            let needs = |id: TensorId| nodes[id.0].requires_grad;

            match &self.nodes[i].op {
                Op::Leaf | Op::Detach => {}
                Op::Add { a, b } => {
                    for &p in [a, b].iter() {
                        if needs(*p) {
                            Self::accumulate(&mut lo_grads[p.0], gy.len(), |g| {
                                for (gi, &gv) in g.iter_mut().zip(gy.iter()) {
                                    *gi += gv;
                                }
                            });
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if needs(*a) {
                        Self::accumulate(&mut lo_grads[a.0], gy.len(), |g| {
                            for (gi, &gv) in g.iter_mut().zip(gy.iter()) {
                                *gi += gv;
                            }
                        });
                    }
                    if needs(*b) {
                        Self::accumulate(&mut lo_grads[b.0], gy.len(), |g| {
                            for (gi, &gv) in g.iter_mut().zip(gy.iter()) {
                                *gi -= gv;
                            }
                        });
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if needs(*a) {
                        Self::accumulate(&mut lo_grads[a.0], gy.len(), |g| {
                            for ((gi, &gv), &bx) in g.iter_mut().zip(gy.iter()).zip(bv.iter()) {
                                *gi += gv * bx;
                            }
                        });
                    }
                    if needs(*b) {
                        Self::accumulate(&mut lo_grads[b.0], gy.len(), |g| {
                            for ((gi, &gv), &ax) in g.iter_mut().zip(gy.iter()).zip(av.iter()) {
                                *gi += gv * ax;
                            }
                        });
                    }
                }
                Op::Scale { x, c } => {
                    if needs(*x) {
                        let c = *c;
                        Self::accumulate(&mut lo_grads[x.0], gy.len(), |g| {
                            for (gi, &gv) in g.iter_mut().zip(gy.iter()) {
                                *gi += gv * c;
                            }
                        });
                    }
                }
                Op::Square { x } => {
                    if needs(*x) {
                        let xv = nodes[x.0].value.data();
                        let two = real::<F>(2.0);
                        Self::accumulate(&mut lo_grads[x.0], gy.len(), |g| {
                            for ((gi, &gv), &x0) in g.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                                *gi += two * x0 * gv;
                            }
                        });
                    }
                }
                Op::Sqrt { x } => {
                    if needs(*x) {
                        let xv = nodes[x.0].value.data();
                        // Guarded denominator: finite gradient when two
                        // compared points coincide (x == 0).
                        let eps = real::<F>(1e-12);
                        let half = real::<F>(0.5);
                        Self::accumulate(&mut lo_grads[x.0], gy.len(), |g| {
                            for ((gi, &gv), &x0) in g.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                                *gi += gv * half / x0.max(eps).sqrt();
                            }
                        });
                    }
                }
                Op::Relu { x } => {
                    if needs(*x) {
                        let xv = nodes[x.0].value.data();
                        let zero = F::zero();
                        Self::accumulate(&mut lo_grads[x.0], gy.len(), |g| {
                            for ((gi, &gv), &x0) in g.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                                if x0 > zero {
                                    *gi += gv;
                                }
                            }
                        });
                    }
                }
                Op::Sum { x, axes } => {
                    if needs(*x) {
                        let in_shape = nodes[x.0].value.shape().to_vec();
                        let map = reduction_map(&in_shape, axes);
                        let numel = nodes[x.0].value.numel();
                        Self::accumulate(&mut lo_grads[x.0], numel, |g| {
                            for (idx, gi) in g.iter_mut().enumerate() {
                                *gi += gy[map.out_index(idx)];
                            }
                        });
                    }
                }
                Op::Reshape { x } => {
                    if needs(*x) {
                        Self::accumulate(&mut lo_grads[x.0], gy.len(), |g| {
                            for (gi, &gv) in g.iter_mut().zip(gy.iter()) {
                                *gi += gv;
                            }
                        });
                    }
                }
                Op::Permute { x, perm } => {
                    if needs(*x) {
                        let out_shape = nodes[i].value.shape().to_vec();
                        let inv = invert_perm(perm);
                        let gy_t = Tensor::new(out_shape, gy.clone()).unwrap();
                        let gx = permute_tensor(&gy_t, &inv);
                        Self::accumulate(&mut lo_grads[x.0], gx.numel(), |g| {
                            for (gi, &gv) in g.iter_mut().zip(gx.data().iter()) {
                                *gi += gv;
                            }
                        });
                    }
                }
                Op::Concat { xs, axis } => {
                    let axis = *axis;
                    let out_shape = nodes[i].value.shape().to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[axis];
                    let mut offset = 0usize;
                    for &x in xs.iter() {
                        let len = nodes[x.0].value.shape()[axis];
                        if needs(x) {
                            let numel = nodes[x.0].value.numel();
                            Self::accumulate(&mut lo_grads[x.0], numel, |g| {
                                for o in 0..outer {
                                    let src_base = (o * total + offset) * inner;
                                    let dst_base = o * len * inner;
                                    for j in 0..len * inner {
                                        g[dst_base + j] += gy[src_base + j];
                                    }
                                }
                            });
                        }
                        offset += len;
                    }
                }
                Op::Slice {
                    x,
                    axis,
                    start,
                    len,
                } => {
                    if needs(*x) {
                        let (axis, start, len) = (*axis, *start, *len);
                        let in_shape = nodes[x.0].value.shape().to_vec();
                        let outer: usize = in_shape[..axis].iter().product();
                        let inner: usize = in_shape[axis + 1..].iter().product();
                        let total = in_shape[axis];
                        let numel = nodes[x.0].value.numel();
                        Self::accumulate(&mut lo_grads[x.0], numel, |g| {
                            for o in 0..outer {
                                let dst_base = (o * total + start) * inner;
                                let src_base = o * len * inner;
                                for j in 0..len * inner {
                                    g[dst_base + j] += gy[src_base + j];
                                }
                            }
                        });
                    }
                }
                Op::Conv1d {
                    input,
                    weight,
                    bias,
                    dilation,
                } => {
                    let (input, weight, bias, dilation) = (*input, *weight, *bias, *dilation);
                    let x = &nodes[input.0].value;
                    let w = &nodes[weight.0].value;
                    if needs(input) {
                        let gx = conv1d_backward_input(w, gy, x.shape(), dilation);
                        Self::accumulate(&mut lo_grads[input.0], gx.len(), |g| {
                            for (gi, &gv) in g.iter_mut().zip(gx.iter()) {
                                *gi += gv;
                            }
                        });
                    }
                    if needs(weight) {
                        let gw = conv1d_backward_weight(x, gy, w.shape(), dilation);
                        Self::accumulate(&mut lo_grads[weight.0], gw.len(), |g| {
                            for (gi, &gv) in g.iter_mut().zip(gw.iter()) {
                                *gi += gv;
                            }
                        });
                    }
                    if needs(bias) {
                        let cout = w.shape()[0];
                        let bsz = x.shape()[0];
                        let t = x.shape()[2];
                        Self::accumulate(&mut lo_grads[bias.0], cout, |g| {
                            for bi in 0..bsz {
                                for co in 0..cout {
                                    let row = &gy[(bi * cout + co) * t..(bi * cout + co + 1) * t];
                                    let mut s = F::zero();
                                    for &v in row {
                                        s += v;
                                    }
                                    g[co] += s;
                                }
                            }
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_map<F: Real>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    if perm.len() != rank {
        return Err(Error::InvalidArg(format!(
            "permutation {perm:?} has wrong length for rank {rank}"
        )));
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::InvalidArg(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(())
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_tensor<F: Real>(x: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![F::zero(); x.numel()];
    let rank = in_shape.len();
    if rank == 0 {
        return x.clone();
    }
    // out[j0..jr] = in[j_{perm}]: walk output linearly, compute source index.
    let src_stride_for_out: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let data = x.data();
    let mut idx = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        let mut src = 0usize;
        for d in 0..rank {
            let q = rem / out_strides[d];
            rem -= q * out_strides[d];
            idx[d] = q;
            src += q * src_stride_for_out[d];
        }
        *slot = data[src];
    }
    Tensor::new(out_shape, out).unwrap()
}

/// Precomputed mapping from an input flat index to the flat index of the
/// reduction output (axes removed).
struct ReductionMap {
    in_strides: Vec<usize>,
    out_stride_per_dim: Vec<usize>,
}

impl ReductionMap {
    #[inline]
    fn out_index(&self, in_flat: usize) -> usize {
        let mut rem = in_flat;
        let mut out = 0usize;
        for (stride, out_stride) in self.in_strides.iter().zip(&self.out_stride_per_dim) {
            let q = rem / stride;
            rem -= q * stride;
            out += q * out_stride;
        }
        out
    }
}

fn reduction_map(shape: &[usize], axes: &[usize]) -> ReductionMap {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_strides = strides(&out_shape);
    let mut out_stride_per_dim = vec![0usize; shape.len()];
    let mut kept = 0usize;
    for (d, slot) in out_stride_per_dim.iter_mut().enumerate() {
        if !axes.contains(&d) {
            *slot = out_strides[kept];
            kept += 1;
        }
    }
    ReductionMap {
        in_strides,
        out_stride_per_dim,
    }
}

fn conv1d_forward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: &Tensor<F>,
    dilation: usize,
) -> Tensor<F> {
    let (b, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let half = (k - 1) / 2;
    let mut out = vec![F::zero(); b * cout * t];
    let xd = x.data();
    let wd = w.data();
    let bd = bias.data();

    let row_job = |row: usize, out_row: &mut [F]| {
        let bi = row / cout;
        let co = row % cout;
        let bv = bd[co];
        for v in out_row.iter_mut() {
            *v = bv;
        }
        for ci in 0..cin {
            let x_row = &xd[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
            for j in 0..k {
                let wv = wd[(co * cin + ci) * k + j];
                let off = (j as isize - half as isize) * dilation as isize;
                let t_lo = (-off).max(0) as usize;
                let t_hi = ((t as isize - off).min(t as isize)).max(0) as usize;
                if t_lo >= t_hi {
                    continue;
                }
                let src = &x_row[(t_lo as isize + off) as usize..(t_hi as isize + off) as usize];
                for (o, &s) in out_row[t_lo..t_hi].iter_mut().zip(src) {
                    *o += wv * s;
                }
            }
        }
    };

    if b * cout * t * cin * k >= PAR_THRESHOLD {
        out.par_chunks_mut(t)
            .enumerate()
            .for_each(|(row, out_row)| row_job(row, out_row));
    } else {
        for (row, out_row) in out.chunks_mut(t).enumerate() {
            row_job(row, out_row);
        }
    }
    Tensor::new(vec![b, cout, t], out).unwrap()
}

fn conv1d_backward_input<F: Real>(
    w: &Tensor<F>,
    gy: &[F],
    x_shape: &[usize],
    dilation: usize,
) -> Vec<F> {
    let (b, cin, t) = (x_shape[0], x_shape[1], x_shape[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let half = (k - 1) / 2;
    let wd = w.data();
    let mut gx = vec![F::zero(); b * cin * t];

    let row_job = |row: usize, gx_row: &mut [F]| {
        let bi = row / cin;
        let ci = row % cin;
        for co in 0..cout {
            let gy_row = &gy[(bi * cout + co) * t..(bi * cout + co + 1) * t];
            for j in 0..k {
                let wv = wd[(co * cin + ci) * k + j];
                // y[t] consumed x[t + off] => x[s] feeds y[s - off].
                let off = (j as isize - half as isize) * dilation as isize;
                let s_lo = off.max(0) as usize;
                let s_hi = ((t as isize + off).min(t as isize)).max(0) as usize;
                if s_lo >= s_hi {
                    continue;
                }
                let src = &gy_row[(s_lo as isize - off) as usize..(s_hi as isize - off) as usize];
                for (g, &u) in gx_row[s_lo..s_hi].iter_mut().zip(src) {
                    *g += wv * u;
                }
            }
        }
    };

    if b * cin * t * cout * k >= PAR_THRESHOLD {
        gx.par_chunks_mut(t)
            .enumerate()
            .for_each(|(row, gx_row)| row_job(row, gx_row));
    } else {
        for (row, gx_row) in gx.chunks_mut(t).enumerate() {
            row_job(row, gx_row);
        }
    }
    gx
}

fn conv1d_backward_weight<F: Real>(
    x: &Tensor<F>,
    gy: &[F],
    w_shape: &[usize],
    dilation: usize,
) -> Vec<F> {
    let (b, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w_shape[0], w_shape[2]);
    let half = (k - 1) / 2;
    let xd = x.data();
    let mut gw = vec![F::zero(); cout * cin * k];

    let co_job = |co: usize, gw_co: &mut [F]| {
        for ci in 0..cin {
            for j in 0..k {
                let off = (j as isize - half as isize) * dilation as isize;
                let t_lo = (-off).max(0) as usize;
                let t_hi = ((t as isize - off).min(t as isize)).max(0) as usize;
                let mut acc = F::zero();
                for bi in 0..b {
                    if t_lo >= t_hi {
                        continue;
                    }
                    let gy_row = &gy[(bi * cout + co) * t..(bi * cout + co + 1) * t];
                    let x_row = &xd[(bi * cin + ci) * t..(bi * cin + ci + 1) * t];
                    let gs = &gy_row[t_lo..t_hi];
                    let xs =
                        &x_row[(t_lo as isize + off) as usize..(t_hi as isize + off) as usize];
                    // Fixed 8-lane partial sums: a deterministic summation
                    // order that the compiler can keep in vector registers.
                    let mut lanes = [F::zero(); 8];
                    let gc = gs.chunks_exact(8);
                    let xc = xs.chunks_exact(8);
                    let (gr, xr) = (gc.remainder(), xc.remainder());
                    for (g8, x8) in gc.zip(xc) {
                        for l in 0..8 {
                            lanes[l] += g8[l] * x8[l];
                        }
                    }
                    let mut row_sum = F::zero();
                    for l in &lanes {
                        row_sum += *l;
                    }
                    for (g0, x0) in gr.iter().zip(xr) {
                        row_sum += *g0 * *x0;
                    }
                    acc += row_sum;
                }
                gw_co[ci * k + j] = acc;
            }
        }
    };

    if b * cout * t * cin * k >= PAR_THRESHOLD {
        gw.par_chunks_mut(cin * k)
            .enumerate()
            .for_each(|(co, gw_co)| co_job(co, gw_co));
    } else {
        for (co, gw_co) in gw.chunks_mut(cin * k).enumerate() {
            co_job(co, gw_co);
        }
    }
    gw
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    /// Direct-summation convolution oracle, independent of the tape path.
    fn naive_conv1d(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &Tensor<f64>,
        dilation: usize,
    ) -> Vec<f64> {
        let (b, cin, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let half = ((k - 1) / 2) as isize;
        let mut out = vec![0.0; b * cout * t];
        for bi in 0..b {
            for co in 0..cout {
                for ti in 0..t as isize {
                    let mut acc = bias.data()[co];
                    for ci in 0..cin {
                        for j in 0..k as isize {
                            let src = ti + (j - half) * dilation as isize;
                            if src >= 0 && src < t as isize {
                                acc += w.data()[(co * cin + ci) * k + j as usize]
                                    * x.data()[(bi * cin + ci) * t + src as usize];
                            }
                        }
                    }
                    out[(bi * cout + co) * t + ti as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv1d_matches_hand_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let b = tape.constant(t1(&[0.0]));
        let y = tape.conv1d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_matches_naive_oracle_on_random_dims() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        for &(b, cin, cout, t, k, d) in
            &[(1, 1, 1, 5, 3, 1), (2, 3, 4, 9, 3, 2), (1, 2, 2, 7, 3, 4), (2, 2, 3, 6, 1, 1)]
        {
            let x = Tensor::new(
                vec![b, cin, t],
                (0..b * cin * t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let w = Tensor::new(
                vec![cout, cin, k],
                (0..cout * cin * k)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap();
            let bias = Tensor::new(
                vec![cout],
                (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let expect = naive_conv1d(&x, &w, &bias, d);
            let mut tape = Tape::new();
            let (xi, wi, bi) = (tape.constant(x), tape.constant(w), tape.constant(bias));
            let y = tape.conv1d(xi, wi, bi, d).unwrap();
            for (got, want) in tape.value(y).data().iter().zip(&expect) {
                assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
            }
        }
    }

    #[test]
    fn conv1d_zero_weight_annihilates() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 4], vec![1.0; 8]).unwrap());
        let w = tape.constant(Tensor::zeros(vec![3, 2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.conv1d(x, w, b, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(y).shape(), &[1, 3, 4]);
    }

    #[test]
    fn conv1d_rejects_channel_mismatch() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 2, 4]));
        let w = tape.constant(Tensor::zeros(vec![3, 5, 3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(matches!(
            tape.conv1d(x, w, b, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv1d_preserves_length() {
        for &(t, d) in &[(1usize, 1usize), (5, 1), (8, 2), (13, 4)] {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.constant(Tensor::zeros(vec![1, 1, t]));
            let w = tape.constant(Tensor::zeros(vec![1, 1, 3]));
            let b = tape.constant(Tensor::zeros(vec![1]));
            let y = tape.conv1d(x, w, b, d).unwrap();
            assert_eq!(tape.value(y).shape()[2], t);
        }
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let p = tape.constant(t1(&[0.5, 3.0, 1.0]));
        let q = tape.relu(p);
        assert_eq!(tape.value(q).data(), tape.value(p).data());
    }

    #[test]
    fn sum_and_norm2_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.sum(x, &[1]).unwrap();
        assert_eq!(tape.value(s).data(), &[3.0, 7.0]);
        assert_eq!(tape.value(s).shape(), &[2]);

        let v = tape.constant(t1(&[3.0, 4.0]));
        let n = tape.norm2(v, 0).unwrap();
        assert_eq!(tape.value(n).item(), 5.0);
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0, 3.0]), true);
        let s = tape.sum(x, &[0]).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_across_two_uses() {
        // loss = sum(x + x) => dloss/dx = 2 on every entry.
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, -2.0]), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y, &[0]).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn detach_blocks_gradient_and_keeps_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.5, -0.5]), true);
        let d = tape.detach(x);
        assert_eq!(tape.value(d).data(), tape.value(x).data());
        let s = tape.sum(d, &[0]).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn straight_through_identity_gradient() {
        // q = p + detach(c - p): value equals c, gradient flows to p as if q.
        let mut tape = Tape::new();
        let p = tape.leaf(t1(&[1.0, 2.0]), true);
        let c = tape.constant(t1(&[5.0, -3.0]));
        let diff = tape.sub(c, p).unwrap();
        let sg = tape.detach(diff);
        let q = tape.add(p, sg).unwrap();
        assert_eq!(tape.value(q).data(), &[5.0, -3.0]);
        let sq = tape.square(q);
        let s = tape.sum(sq, &[0]).unwrap();
        tape.backward(s).unwrap();
        // d(sum q^2)/dq = 2q; straight-through passes it to p verbatim.
        assert_eq!(tape.grad(p).unwrap(), &[10.0, -6.0]);
    }

    #[test]
    fn permute_and_inverse_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap(),
        );
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 1], vec![9.0, 8.0]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = tape.slice(c, 1, 0, 2).unwrap();
        assert_eq!(tape.value(s).data(), tape.value(a).data());
    }

    #[test]
    fn forward_ops_are_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(
                Tensor::new(vec![2, 4, 32], (0..256).map(|v| (v as f32).sin()).collect())
                    .unwrap(),
            );
            let w = tape.constant(
                Tensor::new(vec![4, 4, 3], (0..48).map(|v| (v as f32).cos()).collect()).unwrap(),
            );
            let b = tape.constant(Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap());
            let y = tape.conv1d(x, w, b, 2).unwrap();
            let r = tape.relu(y);
            let s = tape.sum(r, &[0, 1, 2]).unwrap();
            tape.value(s).item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
