//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Trace`] records every op in execution order together with its output
//! value. [`Trace::backward`] walks the records once in reverse, so the tape
//! is topologically ordered by construction. A trace is single-threaded;
//! run independent samples on independent traces.

mod check;
pub(crate) mod kernels;

pub use check::{grad_check, grad_check_sampled, GradCheckReport};
pub use kernels::ReduceKind;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use kernels::{BinaryKind, ConvGeom};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Trace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Negative slope of every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv { x: Var, k: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, dims: [usize; 4] },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Reduce { x: Var, kind: ReduceKind, argmax: Vec<usize> },
    Binary { a: Var, b: Var, kind: BinaryKind },
    Scale { x: Var, c: f64 },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Gem { x: Var, p: Var, axis: usize, eps: f64 },
    Triplet { x: Var, labels: Vec<usize>, margin: f64 },
    CrossEntropy { x: Var, labels: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of ops and their saved activations.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Same-padded, stride-1 cross-correlation over the trailing `dims`
    /// axes.
    ///
    /// `x` is `(cin, batch, spatial..)` and `kernel` is `(cout, cin, k..)`
    /// with one odd kernel extent per spatial axis; `dims` is 1 or 2.
    pub fn conv(&mut self, x: Var, kernel: Var, dims: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if !(dims == 1 || dims == 2) {
            return Err(Error::invalid(format!("conv dims must be 1 or 2, got {dims}")));
        }
        if xs.len() != 2 + dims || ks.len() != 2 + dims {
            return Err(Error::shape(format!(
                "conv{dims}d expects rank-{} input and kernel, got {xs:?} and {ks:?}",
                2 + dims
            )));
        }
        if ks[1] != xs[0] {
            return Err(Error::shape(format!(
                "conv channel mismatch: input has {} channels, kernel expects {}",
                xs[0], ks[1]
            )));
        }
        if ks[2..].iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid(format!("conv kernel extents must be odd, got {ks:?}")));
        }
        let geom = if dims == 1 {
            ConvGeom {
                cin: xs[0],
                cout: ks[0],
                batch: xs[1],
                h: 1,
                w: xs[2],
                kh: 1,
                kw: ks[2],
            }
        } else {
            ConvGeom {
                cin: xs[0],
                cout: ks[0],
                batch: xs[1],
                h: xs[2],
                w: xs[3],
                kh: ks[2],
                kw: ks[3],
            }
        };
        let y = kernels::conv_forward(geom, self.value(x).data(), self.value(kernel).data());
        let mut shape = xs;
        shape[0] = ks[0];
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(Tensor::new(shape, y)?, Op::Conv { x, k: kernel, geom }, rg))
    }

    /// Per-part matrix products: `x (P, B, I)` with `w (P, O, I)` gives
    /// `(P, B, O)`. No bias.
    pub fn batched_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[0] != ws[0] || xs[2] != ws[2] {
            return Err(Error::shape(format!(
                "batched_linear expects (P,B,I) x (P,O,I), got {xs:?} and {ws:?}"
            )));
        }
        let dims = [xs[0], xs[1], xs[2], ws[1]];
        let y = kernels::linear_forward(
            dims[0],
            dims[1],
            dims[2],
            dims[3],
            self.value(x).data(),
            self.value(w).data(),
        );
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(vec![dims[0], dims[1], dims[3]], y)?,
            Op::Linear { x, w, dims },
            rg,
        ))
    }

    /// Row-wise `x (B, I)` times `w (O, I)` transposed, giving `(B, O)`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!(
                "linear expects (B,I) x (O,I), got {xs:?} and {ws:?}"
            )));
        }
        let x3 = self.reshape(x, vec![1, xs[0], xs[1]])?;
        let w3 = self.reshape(w, vec![1, ws[0], ws[1]])?;
        let y = self.batched_linear(x3, w3)?;
        self.reshape(y, vec![xs[0], ws[0]])
    }

    /// Matrix-vector product `W x` for `x (C_in)` and `W (C_out, C_in)`.
    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::shape(format!(
                "dense expects (C_in) and (C_out, C_in), got {xs:?} and {ws:?}"
            )));
        }
        let x2 = self.reshape(x, vec![1, xs[0]])?;
        let y = self.linear(x2, w)?;
        self.reshape(y, vec![ws[0]])
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let slope = LEAKY_SLOPE;
        let t = self.value(x);
        let y: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), y).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y: Vec<f64> = t.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), y).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    /// Reduces `axes` to extent 1. An empty axis set is the identity.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut mask = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::shape(format!("reduce axis {a} out of range for {shape:?}")));
            }
            mask[a] = true;
        }
        let (out_shape, y, argmax) = kernels::reduce_forward(kind, self.value(x).data(), &shape, &mask);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, y)?, Op::Reduce { x, kind, argmax }, rg))
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, ReduceKind::Mean, axes)
    }

    pub fn max(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, ReduceKind::Max, axes)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.reduce(x, ReduceKind::Sum, &axes)?;
        self.reshape(s, vec![1])
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let out = kernels::broadcast_shape(&ash, &bsh).ok_or_else(|| {
            Error::shape(format!("shapes {ash:?} and {bsh:?} do not broadcast"))
        })?;
        let y = kernels::binary_forward(kind, self.value(a).data(), &ash, self.value(b).data(), &bsh, &out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out, y)?, Op::Binary { a, b, kind }, rg))
    }

    /// Elementwise sum with extent-1 broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    /// Elementwise product with extent-1 broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(format!("{axes:?} is not a permutation of {shape:?}")));
        }
        let (out_shape, y) = kernels::permute_forward(self.value(x).data(), &shape, axes);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, y)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) on axis {axis} out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            y.extend_from_slice(&src[(o * ext + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, y)?, Op::Slice { x, axis, start }, rg))
    }

    /// Generalized mean over `axis` with learnable exponent `p` (shape `[1]`).
    /// Inputs are clamped to at least `eps` before exponentiation.
    pub fn gem(&mut self, x: Var, p: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("gem axis {axis} out of range for {shape:?}")));
        }
        if self.shape(p) != [1] {
            return Err(Error::shape("gem exponent must have shape [1]"));
        }
        let pv = self.value(p).item();
        if !(pv >= 1.0) {
            return Err(Error::invalid(format!("gem exponent must be >= 1, got {pv}")));
        }
        let y = kernels::gem_forward(self.value(x).data(), &shape, axis, pv, eps);
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(x) || self.rg(p);
        Ok(self.push(Tensor::new(out_shape, y)?, Op::Gem { x, p, axis, eps }, rg))
    }

    /// Batch-all triplet loss with Euclidean distance on `x (P, B, E)`:
    /// per part the hinge terms are averaged over the strictly positive
    /// ones, then parts are summed.
    pub fn triplet_loss(&mut self, x: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != labels.len() {
            return Err(Error::shape(format!(
                "triplet loss expects (P,B,E) with B = {} labels, got {s:?}",
                labels.len()
            )));
        }
        if kernels::triplets(labels).is_empty() {
            return Err(Error::invalid(
                "triplet loss needs at least two identities and one positive pair",
            ));
        }
        let (loss, _) =
            kernels::triplet_batch_all(self.value(x).data(), s[0], s[1], s[2], labels, margin, None);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Triplet {
                x,
                labels: labels.to_vec(),
                margin,
            },
            rg,
        ))
    }

    /// Softmax cross-entropy on logits `(P, B, K)`, mean over the batch,
    /// summed over parts.
    pub fn cross_entropy(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != labels.len() {
            return Err(Error::shape(format!(
                "cross entropy expects (P,B,K) with B = {} labels, got {s:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s[2]) {
            return Err(Error::invalid(format!("label {bad} out of range for {} classes", s[2])));
        }
        let (loss, _) = kernels::cross_entropy(self.value(x).data(), s[0], s[1], s[2], labels, None);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                x,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Hash of every discrete choice the recorded ops made: max arguments,
    /// leaky ReLU input signs, GeM clamps and active triplet hinges. Two
    /// traces of the same program share a signature exactly when they lie on
    /// the same smooth piece of it.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Reduce {
                    kind: ReduceKind::Max,
                    argmax,
                    ..
                } => (i, argmax).hash(&mut h),
                Op::LeakyRelu { x, .. } => {
                    i.hash(&mut h);
                    self.value(*x).data().iter().for_each(|&v| (v >= 0.0).hash(&mut h));
                }
                Op::Gem { x, eps, .. } => {
                    i.hash(&mut h);
                    self.value(*x).data().iter().for_each(|&v| (v < *eps).hash(&mut h));
                }
                Op::Triplet { x, labels, margin } => {
                    let s = self.shape(*x);
                    let active =
                        kernels::triplet_active(self.value(*x).data(), s[0], s[1], s[2], labels, *margin);
                    (i, active).hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of a one-element `loss` with respect to every recorded var.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let seed = Tensor::full(self.shape(loss).to_vec(), 1.0)?;
        self.backward_from(loss, &seed)
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_from(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[out.0] = Some(seed.data().to_vec());
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..n].iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, d: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, x)| *e += x),
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, k, geom } => {
                if self.rg(*x) {
                    acc(*x, kernels::conv_backward_input(*geom, g, self.value(*k).data()));
                }
                if self.rg(*k) {
                    acc(*k, kernels::conv_backward_kernel(*geom, g, self.value(*x).data()));
                }
            }
            Op::Linear { x, w, dims } => {
                let [p, b, i, o] = *dims;
                if self.rg(*x) {
                    acc(*x, kernels::linear_backward_input(p, b, i, o, g, self.value(*w).data()));
                }
                if self.rg(*w) {
                    acc(*w, kernels::linear_backward_weight(p, b, i, o, g, self.value(*x).data()));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v >= 0.0 { gv } else { gv * slope })
                    .collect();
                acc(*x, d);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(&gv, &s)| gv * s * (1.0 - s)).collect());
            }
            Op::Reduce { x, kind, argmax } => {
                let d = kernels::reduce_backward(*kind, g, self.shape(*x), node.value.shape(), argmax);
                acc(*x, d);
            }
            Op::Binary { a, b, kind } => {
                let (ga, gb) = kernels::binary_backward(
                    *kind,
                    g,
                    self.value(*a).data(),
                    self.shape(*a),
                    self.value(*b).data(),
                    self.shape(*b),
                    node.value.shape(),
                );
                if a == b {
                    acc(*a, ga.iter().zip(&gb).map(|(x, y)| x + y).collect());
                } else {
                    acc(*a, ga);
                    acc(*b, gb);
                }
            }
            Op::Scale { x, c } => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Permute { x, axes } => acc(*x, kernels::permute_backward(g, self.shape(*x), axes)),
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, ext, inner) = kernels::split_axis(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; numel(shape)];
                for o in 0..outer {
                    d[(o * ext + start) * inner..][..len * inner]
                        .copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                acc(*x, d);
            }
            Op::Gem { x, p, axis, eps } => {
                let pv = self.value(*p).item();
                let (dx, dp) = kernels::gem_backward(
                    g,
                    self.value(*x).data(),
                    node.value.data(),
                    self.shape(*x),
                    *axis,
                    pv,
                    *eps,
                );
                acc(*x, dx);
                acc(*p, vec![dp]);
            }
            Op::Triplet { x, labels, margin } => {
                let s = self.shape(*x);
                let (_, d) = kernels::triplet_batch_all(
                    self.value(*x).data(),
                    s[0],
                    s[1],
                    s[2],
                    labels,
                    *margin,
                    Some(g[0]),
                );
                acc(*x, d);
            }
            Op::CrossEntropy { x, labels } => {
                let s = self.shape(*x);
                let (_, d) =
                    kernels::cross_entropy(self.value(*x).data(), s[0], s[1], s[2], labels, Some(g[0]));
                acc(*x, d);
            }
        }
    }
}
