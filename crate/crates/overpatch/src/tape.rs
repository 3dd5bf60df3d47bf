//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass in topological
//! order; [`Tape::backward`] replays the records in reverse exactly once and
//! accumulates gradients into every leaf created with `requires_grad`.
//!
//! The op set is deliberately small: just enough for a compact CNN
//! classifier, a patch renderer (`gather`), an opaque compositor
//! (`overlay`) and the penalty terms built from elementwise arithmetic.
//! One tape supports one backward pass; build a fresh tape per step.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::TensorError;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Spatial padding mode for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial extent is `ceil(extent / stride)`; zero padding split
    /// evenly with the extra row/column at the bottom/right.
    Same,
    /// No padding; kernel must fit inside the input.
    Valid,
}

/// Destination/source window for [`Tape::overlay`], already clipped to the
/// base image. `rows == 0 || cols == 0` is rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverlayRect {
    pub base_row0: usize,
    pub base_col0: usize,
    pub patch_row0: usize,
    pub patch_col0: usize,
    pub rows: usize,
    pub cols: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Clamp01(Var),
    Sum(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: (usize, usize),
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weights: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<T>,
    },
    Gather {
        input: Var,
        map: Arc<Vec<usize>>,
    },
    Overlay {
        base: Var,
        patch: Var,
        rect: OverlayRect,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    needs_grad: bool,
    op: Op<T>,
}

/// Records a forward computation and runs one backward pass over it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf tensor. Gradients accumulate into it during
    /// [`Tape::backward`] iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, requires_grad, Op::Leaf)
    }

    /// Registers a constant (leaf without gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if one was
    /// computed for this node.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, needs_grad: bool, op: Op<T>) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            needs_grad,
            op,
        });
        Var(idx)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(sa.to_vec(), data).expect("same shape as operands");
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, false, needs, op))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise difference `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(value, false, needs, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(value, false, needs, Op::Relu(a))
    }

    /// Clamps into `[0, 1]`. The backward rule passes gradient only where
    /// the input lies strictly inside `(0, 1)`; the subgradient at the
    /// boundary is 0.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let one = T::one();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                if x < T::zero() {
                    T::zero()
                } else if x > one {
                    one
                } else {
                    x
                }
            })
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(value, false, needs, Op::Clamp01(a))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut acc = T::zero();
        for &x in self.value(a).data() {
            acc += x;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(acc), false, needs, Op::Sum(a))
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::DataLength {
                shape,
                expected: numel,
                actual: self.value(a).numel(),
            });
        }
        let value = Tensor::new(shape, self.value(a).data().to_vec()).unwrap();
        let needs = self.needs(a);
        Ok(self.push(value, false, needs, Op::Reshape(a)))
    }

    /// Flattens to rank 1.
    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        self.reshape(a, vec![n]).expect("numel unchanged")
    }

    /// 2-D cross-correlation of `input [H,W,Cin]` with
    /// `kernel [kh,kw,Cin,Cout]`, producing `[Ho,Wo,Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernel).shape().to_vec();
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(TensorError::Rank {
                op: "conv2d",
                expected: "input rank 3 [H,W,Cin], kernel rank 4 [kh,kw,Cin,Cout]",
                actual: format!("input {:?}, kernel {:?}", ishape, kshape),
            });
        }
        if stride == 0 {
            return Err(TensorError::BadArgument {
                op: "conv2d",
                message: "stride must be positive".into(),
            });
        }
        let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
        let (kh, kw, kcin, cout) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d channels",
                lhs: ishape,
                rhs: kshape,
            });
        }
        let (ho, wo, pad) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d kernel larger than input",
                        lhs: ishape,
                        rhs: kshape,
                    });
                }
                (((h - kh) / stride) + 1, ((w - kw) / stride) + 1, (0, 0))
            }
            Padding::Same => {
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
                (ho, wo, (pad_h / 2, pad_w / 2))
            }
        };

        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![T::zero(); ho * wo * cout];
        let mut acc = vec![T::zero(); cout];
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - pad.0 as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - pad.1 as isize;
                acc.fill(T::zero());
                for ky in 0..kh {
                    let y = y0 + ky as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let xx = x0 + kx as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let ibase = ((y as usize) * w + xx as usize) * cin;
                        let kbase = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let v = x[ibase + ci];
                            let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (a, &kv) in acc.iter_mut().zip(krow) {
                                *a += v * kv;
                            }
                        }
                    }
                }
                out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout].copy_from_slice(&acc);
            }
        }
        let value = Tensor::new(vec![ho, wo, cout], out).unwrap();
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            value,
            false,
            needs,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
        ))
    }

    /// Non-overlapping 2x2 max pooling over `[H,W,C]`. Ties break to the
    /// first window position in row-major order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var, TensorError> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 {
            return Err(TensorError::Rank {
                op: "maxpool2",
                expected: "rank 3 [H,W,C]",
                actual: format!("{:?}", shape),
            });
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::BadArgument {
                op: "maxpool2",
                message: format!("spatial extents must be even, got {}x{}", h, w),
            });
        }
        let x = self.value(input).data();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![T::zero(); ho * wo * c];
        let mut argmax = vec![0usize; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best_idx = ((2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (oy * wo + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![ho, wo, c], out).unwrap();
        let needs = self.needs(input);
        Ok(self.push(value, false, needs, Op::MaxPool2 { input, argmax }))
    }

    /// Affine map `input [n] x weights [n,m] + bias [m] -> [m]`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var, TensorError> {
        let ishape = self.value(input).shape().to_vec();
        let wshape = self.value(weights).shape().to_vec();
        let bshape = self.value(bias).shape().to_vec();
        if ishape.len() != 1 || wshape.len() != 2 || bshape.len() != 1 {
            return Err(TensorError::Rank {
                op: "dense",
                expected: "input [n], weights [n,m], bias [m]",
                actual: format!("input {:?}, weights {:?}, bias {:?}", ishape, wshape, bshape),
            });
        }
        let (n, m) = (wshape[0], wshape[1]);
        if ishape[0] != n || bshape[0] != m {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: ishape,
                rhs: wshape,
            });
        }
        let x = self.value(input).data();
        let wm = self.value(weights).data();
        let mut out = self.value(bias).data().to_vec();
        for i in 0..n {
            let xi = x[i];
            let row = &wm[i * m..(i + 1) * m];
            for (o, &wv) in out.iter_mut().zip(row) {
                *o += xi * wv;
            }
        }
        let value = Tensor::new(vec![m], out).unwrap();
        let needs = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(
            value,
            false,
            needs,
            Op::Dense {
                input,
                weights,
                bias,
            },
        ))
    }

    /// Numerically stable `-log softmax(logits)[label]` as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TensorError> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 1 {
            return Err(TensorError::Rank {
                op: "softmax_cross_entropy",
                expected: "rank 1 logits",
                actual: format!("{:?}", shape),
            });
        }
        let k = shape[0];
        if label >= k {
            return Err(TensorError::BadArgument {
                op: "softmax_cross_entropy",
                message: format!("label {} out of range for {} classes", label, k),
            });
        }
        let x = self.value(logits).data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "softmax_cross_entropy",
            });
        }
        let max = x.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut denom = T::zero();
        let mut probs = vec![T::zero(); k];
        for (p, &v) in probs.iter_mut().zip(x) {
            let e = (v - max).exp();
            *p = e;
            denom += e;
        }
        for p in probs.iter_mut() {
            *p = *p / denom;
        }
        let loss = denom.ln() - (x[label] - max);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            false,
            needs,
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Re-indexing op: `out[i] = input[map[i]]`. The backward rule
    /// scatter-adds, so an entry that covers several output positions
    /// receives the sum of their gradients.
    pub fn gather(
        &mut self,
        input: Var,
        map: Arc<Vec<usize>>,
        out_shape: Vec<usize>,
    ) -> Result<Var, TensorError> {
        let numel: usize = out_shape.iter().product();
        if numel != map.len() {
            return Err(TensorError::DataLength {
                shape: out_shape,
                expected: numel,
                actual: map.len(),
            });
        }
        let in_numel = self.value(input).numel();
        if let Some(&bad) = map.iter().find(|&&i| i >= in_numel) {
            return Err(TensorError::BadArgument {
                op: "gather",
                message: format!("map index {} out of range for {} elements", bad, in_numel),
            });
        }
        let x = self.value(input).data();
        let data: Vec<T> = map.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(out_shape, data).unwrap();
        let needs = self.needs(input);
        Ok(self.push(value, false, needs, Op::Gather { input, map }))
    }

    /// Opaque composite: copies `base [H,W,C]` and replaces the window
    /// described by `rect` with the matching window of `patch [ph,pw,C]`.
    /// Every output pixel comes from exactly one source.
    pub fn overlay(
        &mut self,
        base: Var,
        patch: Var,
        rect: OverlayRect,
    ) -> Result<Var, TensorError> {
        let bshape = self.value(base).shape().to_vec();
        let pshape = self.value(patch).shape().to_vec();
        if bshape.len() != 3 || pshape.len() != 3 || bshape[2] != pshape[2] {
            return Err(TensorError::Rank {
                op: "overlay",
                expected: "base [H,W,C] and patch [ph,pw,C]",
                actual: format!("base {:?}, patch {:?}", bshape, pshape),
            });
        }
        if rect.rows == 0 || rect.cols == 0 {
            return Err(TensorError::BadArgument {
                op: "overlay",
                message: "empty overlay window".into(),
            });
        }
        if rect.base_row0 + rect.rows > bshape[0]
            || rect.base_col0 + rect.cols > bshape[1]
            || rect.patch_row0 + rect.rows > pshape[0]
            || rect.patch_col0 + rect.cols > pshape[1]
        {
            return Err(TensorError::BadArgument {
                op: "overlay",
                message: format!(
                    "window {:?} exceeds base {:?} or patch {:?}",
                    rect, bshape, pshape
                ),
            });
        }
        let c = bshape[2];
        let (bw, pw) = (bshape[1], pshape[1]);
        let mut out = self.value(base).data().to_vec();
        {
            let p = self.value(patch).data();
            for r in 0..rect.rows {
                let dst = ((rect.base_row0 + r) * bw + rect.base_col0) * c;
                let src = ((rect.patch_row0 + r) * pw + rect.patch_col0) * c;
                out[dst..dst + rect.cols * c].copy_from_slice(&p[src..src + rect.cols * c]);
            }
        }
        let value = Tensor::new(bshape, out).unwrap();
        let needs = self.needs(base) || self.needs(patch);
        Ok(self.push(value, false, needs, Op::Overlay { base, patch, rect }))
    }

    /// Reverse pass from a scalar root. Each recorded op is visited exactly
    /// once, in reverse recording order. A tape supports a single backward
    /// pass; calling it again is an error.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::BadArgument {
                op: "backward",
                message: format!(
                    "root must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            });
        }
        self.backward_done = true;
        for node in self.nodes.iter_mut() {
            if node.needs_grad {
                node.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        if self.nodes[loss.0].grad.is_none() {
            // Loss does not depend on any requires_grad leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = T::one();

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let gout = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            // Dispatch on a borrowed op while writing into input grads.
            // Ops never reference themselves, so split via raw index access.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, |g| {
                        for (dst, &s) in g.iter_mut().zip(&gout) {
                            *dst += s;
                        }
                    });
                    self.accumulate(b, |g| {
                        for (dst, &s) in g.iter_mut().zip(&gout) {
                            *dst += s;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, |g| {
                        for (dst, &s) in g.iter_mut().zip(&gout) {
                            *dst += s;
                        }
                    });
                    self.accumulate(b, |g| {
                        for (dst, &s) in g.iter_mut().zip(&gout) {
                            *dst -= s;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.accumulate(a, |g| {
                        for ((dst, &s), &other) in g.iter_mut().zip(&gout).zip(&bv) {
                            *dst += s * other;
                        }
                    });
                    self.accumulate(b, |g| {
                        for ((dst, &s), &other) in g.iter_mut().zip(&gout).zip(&av) {
                            *dst += s * other;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accumulate(a, |g| {
                        for (dst, &s) in g.iter_mut().zip(&gout) {
                            *dst += s * c;
                        }
                    });
                }
                Op::Relu(a) => {
                    let a = *a;
                    let xv = self.nodes[a.0].value.data().to_vec();
                    self.accumulate(a, |g| {
                        for ((dst, &s), &x) in g.iter_mut().zip(&gout).zip(&xv) {
                            if x > T::zero() {
                                *dst += s;
                            }
                        }
                    });
                }
                Op::Clamp01(a) => {
                    let a = *a;
                    let xv = self.nodes[a.0].value.data().to_vec();
                    self.accumulate(a, |g| {
                        for ((dst, &s), &x) in g.iter_mut().zip(&gout).zip(&xv) {
                            if x > T::zero() && x < T::one() {
                                *dst += s;
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let a = *a;
                    let s = gout[0];
                    self.accumulate(a, |g| {
                        for dst in g.iter_mut() {
                            *dst += s;
                        }
                    });
                }
                Op::Reshape(a) => {
                    let a = *a;
                    self.accumulate(a, |g| {
                        for (dst, &s) in g.iter_mut().zip(&gout) {
                            *dst += s;
                        }
                    });
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (input, kernel, stride, pad) = (*input, *kernel, *stride, *pad);
                    self.conv2d_backward(i, input, kernel, stride, pad, &gout);
                }
                Op::MaxPool2 { input, argmax } => {
                    let input = *input;
                    let argmax = argmax.clone();
                    self.accumulate(input, |g| {
                        for (&idx, &s) in argmax.iter().zip(&gout) {
                            g[idx] += s;
                        }
                    });
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let (input, weights, bias) = (*input, *weights, *bias);
                    let x = self.nodes[input.0].value.data().to_vec();
                    let wm = self.nodes[weights.0].value.data().to_vec();
                    let (n, m) = (x.len(), gout.len());
                    self.accumulate(input, |g| {
                        for (i2, dst) in g.iter_mut().enumerate() {
                            let row = &wm[i2 * m..(i2 + 1) * m];
                            let mut acc = T::zero();
                            for (&s, &wv) in gout.iter().zip(row) {
                                acc += s * wv;
                            }
                            *dst += acc;
                        }
                    });
                    self.accumulate(weights, |g| {
                        for i2 in 0..n {
                            let xi = x[i2];
                            let row = &mut g[i2 * m..(i2 + 1) * m];
                            for (dst, &s) in row.iter_mut().zip(&gout) {
                                *dst += xi * s;
                            }
                        }
                    });
                    self.accumulate(bias, |g| {
                        for (dst, &s) in g.iter_mut().zip(&gout) {
                            *dst += s;
                        }
                    });
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let (logits, label) = (*logits, *label);
                    let probs = probs.clone();
                    let s = gout[0];
                    self.accumulate(logits, |g| {
                        for (j, (dst, &p)) in g.iter_mut().zip(&probs).enumerate() {
                            let target = if j == label { T::one() } else { T::zero() };
                            *dst += s * (p - target);
                        }
                    });
                }
                Op::Gather { input, map } => {
                    let input = *input;
                    let map = Arc::clone(map);
                    self.accumulate(input, |g| {
                        for (&idx, &s) in map.iter().zip(&gout) {
                            g[idx] += s;
                        }
                    });
                }
                Op::Overlay { base, patch, rect } => {
                    let (base, patch, rect) = (*base, *patch, *rect);
                    let c = self.nodes[base.0].value.shape()[2];
                    let bw = self.nodes[base.0].value.shape()[1];
                    let pw = self.nodes[patch.0].value.shape()[1];
                    self.accumulate(patch, |g| {
                        for r in 0..rect.rows {
                            let dst = ((rect.patch_row0 + r) * pw + rect.patch_col0) * c;
                            let src = ((rect.base_row0 + r) * bw + rect.base_col0) * c;
                            for (pg, &s) in g[dst..dst + rect.cols * c]
                                .iter_mut()
                                .zip(&gout[src..src + rect.cols * c])
                            {
                                *pg += s;
                            }
                        }
                    });
                    self.accumulate(base, |g| {
                        for (row, dst) in g.chunks_mut(bw * c).enumerate() {
                            let src = &gout[row * bw * c..(row + 1) * bw * c];
                            let covered = row >= rect.base_row0 && row < rect.base_row0 + rect.rows;
                            for (col_ch, (dv, &sv)) in dst.iter_mut().zip(src).enumerate() {
                                let col = col_ch / c;
                                let inside =
                                    covered && col >= rect.base_col0 && col < rect.base_col0 + rect.cols;
                                if !inside {
                                    *dv += sv;
                                }
                            }
                        }
                    });
                }
            }
            // Intermediate gradients are no longer needed once consumed;
            // only leaves keep theirs for the caller.
            if self.nodes[i].requires_grad {
                self.nodes[i].grad = Some(gout);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(g) = self.nodes[v.0].grad.as_mut() {
            f(g.as_mut_slice());
        }
    }

    fn conv2d_backward(
        &mut self,
        out: usize,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: (usize, usize),
        gout: &[T],
    ) {
        let ishape = self.nodes[input.0].value.shape().to_vec();
        let kshape = self.nodes[kernel.0].value.shape().to_vec();
        let oshape = self.nodes[out].value.shape().to_vec();
        let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
        let (kh, kw, _, cout) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        let (ho, wo) = (oshape[0], oshape[1]);

        let want_input = self.nodes[input.0].grad.is_some();
        let want_kernel = self.nodes[kernel.0].grad.is_some();
        let x = self.nodes[input.0].value.data().to_vec();
        let k = self.nodes[kernel.0].value.data().to_vec();
        let mut gin = if want_input {
            vec![T::zero(); h * w * cin]
        } else {
            Vec::new()
        };
        let mut gk = if want_kernel {
            vec![T::zero(); kh * kw * cin * cout]
        } else {
            Vec::new()
        };

        for oy in 0..ho {
            let y0 = (oy * stride) as isize - pad.0 as isize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - pad.1 as isize;
                let gslice = &gout[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                for ky in 0..kh {
                    let y = y0 + ky as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let xx = x0 + kx as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let ibase = ((y as usize) * w + xx as usize) * cin;
                        let kbase = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let krow = &k[kbase + ci * cout..kbase + (ci + 1) * cout];
                            if want_input {
                                let mut acc = T::zero();
                                for (&s, &kv) in gslice.iter().zip(krow) {
                                    acc += s * kv;
                                }
                                gin[ibase + ci] += acc;
                            }
                            if want_kernel {
                                let v = x[ibase + ci];
                                let grow = &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                                for (dst, &s) in grow.iter_mut().zip(gslice) {
                                    *dst += v * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_input {
            self.accumulate(input, |g| {
                for (dst, &s) in g.iter_mut().zip(&gin) {
                    *dst += s;
                }
            });
        }
        if want_kernel {
            self.accumulate(kernel, |g| {
                for (dst, &s) in g.iter_mut().zip(&gk) {
                    *dst += s;
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_scalar_product() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 1, 1], &[1.0]));
        let k = tape.constant(t64(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn conv2d_counting_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(vec![3, 3, 1], 1.0));
        let k = tape.constant(Tensor::filled(vec![2, 2, 1, 1], 1.0));
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2, 1]);
        assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv2d_shape_mismatch_is_descriptive() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![4, 4, 2]));
        let k = tape.constant(Tensor::zeros(vec![3, 3, 3, 4]));
        let err = tape.conv2d(x, k, 1, Padding::Valid).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn maxpool2_basics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.constant(Tensor::filled(vec![4, 4, 2], 0.5));
        let yc = tape.maxpool2(c).unwrap();
        assert_eq!(tape.value(yc).shape(), &[2, 2, 2]);
        assert!(tape.value(yc).data().iter().all(|&v| v == 0.5));

        let odd = tape.constant(Tensor::zeros(vec![3, 4, 1]));
        assert!(tape.maxpool2(odd).is_err());
    }

    #[test]
    fn maxpool2_tie_breaks_to_first_index() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(vec![2, 2, 1], 7.0), true);
        let y = tape.maxpool2(x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        // All four inputs tie; gradient must land on the first one only.
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_identity_and_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[3], &[1.0, -2.0, 0.5]));
        let eye = tape.constant(t64(
            &[3, 3],
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let zero_b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.dense(x, eye, zero_b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -2.0, 0.5]);

        let zero_w = tape.constant(Tensor::zeros(vec![3, 2]));
        let b = tape.constant(t64(&[2], &[0.25, -0.75]));
        let y2 = tape.dense(x, zero_w, b).unwrap();
        assert_eq!(tape.value(y2).data(), &[0.25, -0.75]);

        let bad_b = tape.constant(Tensor::zeros(vec![3]));
        assert!(tape.dense(x, zero_w, bad_b).is_err());
    }

    #[test]
    fn relu_and_clamp_trivials() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[4], &[-1.0, 2.0, 1.5, -0.2]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 1.5, 0.0]);
        let c = tape.clamp01(x);
        assert_eq!(tape.value(c).data(), &[0.0, 1.0, 1.0, 0.0]);
        // clamp01 is idempotent.
        let cc = tape.clamp01(c);
        assert_eq!(tape.value(cc).data(), tape.value(c).data());
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::zeros(vec![5]));
        let loss = tape.softmax_cross_entropy(uniform, 2).unwrap();
        assert!((tape.value(loss).item() - 5.0f64.ln()).abs() < 1e-12);

        let mut hot = vec![0.0; 5];
        hot[1] = 1e6;
        let sat = tape.constant(t64(&[5], &hot));
        let loss2 = tape.softmax_cross_entropy(sat, 1).unwrap();
        assert!(tape.value(loss2).item() < 1e-9);

        assert!(tape.softmax_cross_entropy(uniform, 5).is_err());
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_2x() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[0.5, -1.0, 2.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[0.5, -1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, -2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(
            tape.backward(s),
            Err(TensorError::BackwardAlreadyRun)
        ));
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[0.3, -1.2, 0.9, 0.1]), true);
        let loss = tape.softmax_cross_entropy(x, 3).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let total: f64 = g.data().iter().sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_adds_in_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[3.0, 5.0]), true);
        let map = Arc::new(vec![0, 0, 1]);
        let y = tape.gather(x, map, vec![3]).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 3.0, 5.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn overlay_replaces_window_and_routes_gradient() {
        let mut tape = Tape::<f64>::new();
        let base = tape.leaf(Tensor::filled(vec![3, 3, 1], 1.0), true);
        let patch = tape.leaf(Tensor::filled(vec![2, 2, 1], 9.0), true);
        let rect = OverlayRect {
            base_row0: 1,
            base_col0: 1,
            patch_row0: 0,
            patch_col0: 0,
            rows: 2,
            cols: 2,
        };
        let out = tape.overlay(base, patch, rect).unwrap();
        let v = tape.value(out).data();
        assert_eq!(v[0], 1.0); // untouched corner
        assert_eq!(v[4], 9.0); // replaced center
        let s = tape.sum(out);
        tape.backward(s).unwrap();
        // Base gradient is zero on the covered window, one elsewhere.
        let gb = tape.grad(base).unwrap();
        assert_eq!(gb.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let gp = tape.grad(patch).unwrap();
        assert!(gp.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(
                Tensor::new(vec![2, 2, 1], vec![0.1, 0.7, 0.3, 0.9]).unwrap(),
                true,
            );
            let k = tape.constant(Tensor::new(vec![2, 2, 1, 2], vec![0.5; 8]).unwrap());
            let c = tape.conv2d(x, k, 1, Padding::Same).unwrap();
            let f = tape.flatten(c);
            let loss = tape.softmax_cross_entropy(f, 1).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(loss).item().to_bits(),
                tape.grad(x)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn planted_wrong_backward_rule_is_detected() {
        // Forward value computed with factor 3 while the recorded op says
        // factor 2: the checker must flag the mismatch loudly.
        let buggy = |tape: &mut Tape<f64>, x: Var| {
            let data: Vec<f64> = tape.value(x).data().iter().map(|&v| v * 3.0).collect();
            let value = Tensor::new(tape.value(x).shape().to_vec(), data).unwrap();
            let needs = tape.needs(x);
            let y = tape.push(value, false, needs, Op::Scale(x, 2.0));
            tape.sum(y)
        };
        let at = t64(&[3], &[0.2, -0.4, 0.7]);
        let report = finite_diff_check(buggy, &at, 1e-5);
        assert!(report.max_rel_err > 1e-2);
    }
}
