use super::{split_axis, Scalar, Tensor};
use crate::error::TensorError;
use crate::tensor::gemm::{gemm, Transpose};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Conv2dSaved<T> {
    pub stride: usize,
    pub pad: usize,
    pub ksize: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub cout: usize,
    pub cols: Vec<T>,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        saved: Box<Conv2dSaved<T>>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    Max {
        input: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    Concat(Vec<Var>, usize),
    Upsample2x(Var),
    Bilinear {
        grid: Var,
        coords: Var,
    },
    Dot(Var, Var),
    L2Normalize(Var),
    Reshape(Var),
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        input: Var,
        index: Vec<usize>,
    },
    SegmentSum {
        input: Var,
        offsets: Vec<usize>,
    },
    SegmentMean {
        input: Var,
        offsets: Vec<usize>,
    },
    SegmentMax {
        input: Var,
        argmax: Vec<usize>,
    },
    SegmentSoftmax {
        input: Var,
        offsets: Vec<usize>,
    },
    ScaleRows {
        input: Var,
        weights: Var,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
}

impl<T> Op<T> {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Dot(a, b) => {
                f(*a);
                f(*b);
            }
            Op::AddBias(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Scale(a, _)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a, _)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Upsample2x(a)
            | Op::L2Normalize(a)
            | Op::Reshape(a) => f(*a),
            Op::Conv2d { input, weight, .. } => {
                f(*input);
                f(*weight);
            }
            Op::Max { input, .. }
            | Op::GatherRows { input, .. }
            | Op::ScatterRows { input, .. }
            | Op::SegmentSum { input, .. }
            | Op::SegmentMean { input, .. }
            | Op::SegmentMax { input, .. }
            | Op::SegmentSoftmax { input, .. }
            | Op::SliceCols { input, .. } => f(*input),
            Op::Concat(inputs, _) => inputs.iter().copied().for_each(f),
            Op::Bilinear { grid, coords } => {
                f(*grid);
                f(*coords);
            }
            Op::ScaleRows { input, weights } => {
                f(*input);
                f(*weights);
            }
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Ordered record of executed primitives. Node `i` only ever refers to
/// nodes with a smaller index, so a reverse sweep is a valid topological
/// order for backpropagation.
pub struct Tape<T: Scalar = f32> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let mut needs_grad = false;
        op.for_each_input(|v| needs_grad |= self.nodes[v.0].needs_grad);
        // Constant subgraphs keep no backward state.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            self.backward_node(node, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, gd, T::one()));
                self.accumulate(grads, *b, |d| axpy(d, gd, T::one()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, gd, T::one()));
                self.accumulate(grads, *b, |d| axpy(d, gd, -T::one()));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, g), b) in d.iter_mut().zip(gd).zip(bv) {
                        *d += *g * *b;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), a) in d.iter_mut().zip(gd).zip(av) {
                        *d += *g * *a;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |d| axpy(d, gd, *s)),
            Op::Abs(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(av) {
                        // Subgradient 0 at the kink.
                        if *x > T::zero() {
                            *d += *g;
                        } else if *x < T::zero() {
                            *d = *d - *g;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |d| {
                    gemm(m, n, k, gd, Transpose::No, bv, Transpose::Yes, d, true)
                });
                self.accumulate(grads, *b, |d| {
                    gemm(k, m, n, av, Transpose::Yes, gd, Transpose::No, d, true)
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |d| axpy(d, gd, T::one()));
                let c = self.shape(*b)[0];
                self.accumulate(grads, *b, |d| {
                    for row in gd.chunks_exact(c) {
                        axpy(d, row, T::one());
                    }
                });
            }
            Op::Conv2d {
                input,
                weight,
                saved,
            } => {
                let s = saved.as_ref();
                let p = s.out_h * s.out_w;
                let kk = s.ksize * s.ksize * s.cin;
                self.accumulate(grads, *weight, |d| {
                    gemm(kk, p, s.cout, &s.cols, Transpose::Yes, gd, Transpose::No, d, true)
                });
                if self.nodes[input.0].needs_grad {
                    let wv = self.value(*weight).data();
                    let mut dcols = vec![T::zero(); p * kk];
                    gemm(p, s.cout, kk, gd, Transpose::No, wv, Transpose::Yes, &mut dcols, false);
                    self.accumulate(grads, *input, |d| super::ops::col2im(s, &dcols, d));
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(av) {
                        if *x > T::zero() {
                            *d += *g;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, g), x) in d.iter_mut().zip(gd).zip(av) {
                        *d += if *x > T::zero() { *g } else { *g * *slope };
                    }
                });
            }
            Op::Tanh(a) => self.accumulate(grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(gd).zip(out) {
                    *d += *g * (T::one() - *y * *y);
                }
            }),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(gd).zip(out) {
                    *d += *g * *y * (T::one() - *y);
                }
            }),
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                self.accumulate(grads, *a, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut dot = T::zero();
                            for j in 0..len {
                                dot += gd[at(j)] * out[at(j)];
                            }
                            for j in 0..len {
                                d[at(j)] += out[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                let scale = if matches!(node.op, Op::Mean(..)) {
                    T::one() / T::from_f64(len as f64)
                } else {
                    T::one()
                };
                self.accumulate(grads, *a, |d| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                d[(o * len + j) * inner + i] += gd[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Max {
                input,
                axis,
                argmax,
            } => {
                let (_, len, inner) = split_axis(self.shape(*input), *axis);
                self.accumulate(grads, *input, |d| {
                    for (r, &j) in argmax.iter().enumerate() {
                        let (o, i) = (r / inner, r % inner);
                        d[(o * len + j) * inner + i] += gd[r];
                    }
                });
            }
            Op::SumAll(a) => self.accumulate(grads, *a, |d| d.iter_mut().for_each(|v| *v += gd[0])),
            Op::MeanAll(a) => {
                let n = T::from_f64(self.value(*a).len() as f64);
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|v| *v += gd[0] / n));
            }
            Op::Concat(inputs, axis) => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    self.accumulate(grads, *v, |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            axpy(&mut d[dst..dst + len * inner], &gd[src..src + len * inner], T::one());
                        }
                    });
                    offset += len;
                }
            }
            Op::Upsample2x(a) => {
                let shape = self.shape(*a);
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                self.accumulate(grads, *a, |d| {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let src = (y * 2 * w + x) * c;
                            let dst = ((y / 2) * w + x / 2) * c;
                            axpy(&mut d[dst..dst + c], &gd[src..src + c], T::one());
                        }
                    }
                });
            }
            Op::Bilinear { grid, coords } => {
                let gshape = self.shape(*grid);
                let (h, w, c) = (gshape[0], gshape[1], gshape[2]);
                let gv = self.value(*grid).data();
                let cv = self.value(*coords).data();
                self.accumulate(grads, *grid, |d| {
                    for (p, xy) in cv.chunks_exact(2).enumerate() {
                        let s = super::ops::bilinear_taps(xy[0], xy[1], h, w);
                        let gp = &gd[p * c..(p + 1) * c];
                        for (idx, wt) in s.taps() {
                            axpy(&mut d[idx * c..(idx + 1) * c], gp, wt);
                        }
                    }
                });
                self.accumulate(grads, *coords, |d| {
                    for (p, xy) in cv.chunks_exact(2).enumerate() {
                        let s = super::ops::bilinear_taps(xy[0], xy[1], h, w);
                        let gp = &gd[p * c..(p + 1) * c];
                        let (dx, dy) = s.coord_grad(gv, c, gp);
                        d[2 * p] += dx;
                        d[2 * p + 1] += dy;
                    }
                });
            }
            Op::Dot(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |d| axpy(d, bv, gd[0]));
                self.accumulate(grads, *b, |d| axpy(d, av, gd[0]));
            }
            Op::L2Normalize(a) => {
                let shape = self.shape(*a);
                let c = *shape.last().unwrap();
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for ((dr, xr), (gr, yr)) in d
                        .chunks_exact_mut(c)
                        .zip(av.chunks_exact(c))
                        .zip(gd.chunks_exact(c).zip(out.chunks_exact(c)))
                    {
                        let norm = xr.iter().map(|v| *v * *v).sum::<T>().sqrt();
                        if norm <= T::from_f64(super::ops::L2_EPS) {
                            let inv = T::one() / T::from_f64(super::ops::L2_EPS);
                            axpy(dr, gr, inv);
                            continue;
                        }
                        let gy: T = gr.iter().zip(yr).map(|(g, y)| *g * *y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += (*g - *y * gy) / norm;
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |d| axpy(d, gd, T::one())),
            Op::GatherRows { input, index } => {
                let c = self.shape(*input)[1];
                self.accumulate(grads, *input, |d| {
                    for (r, &src) in index.iter().enumerate() {
                        axpy(&mut d[src * c..(src + 1) * c], &gd[r * c..(r + 1) * c], T::one());
                    }
                });
            }
            Op::ScatterRows { input, index } => {
                let c = self.shape(*input)[1];
                self.accumulate(grads, *input, |d| {
                    for (r, &dst) in index.iter().enumerate() {
                        axpy(&mut d[r * c..(r + 1) * c], &gd[dst * c..(dst + 1) * c], T::one());
                    }
                });
            }
            Op::SegmentSum { input, offsets } | Op::SegmentMean { input, offsets } => {
                let c = self.shape(*input)[1];
                let mean = matches!(node.op, Op::SegmentMean { .. });
                self.accumulate(grads, *input, |d| {
                    for (s, win) in offsets.windows(2).enumerate() {
                        let n = win[1] - win[0];
                        if n == 0 {
                            continue;
                        }
                        let scale = if mean {
                            T::one() / T::from_f64(n as f64)
                        } else {
                            T::one()
                        };
                        let gs = &gd[s * c..(s + 1) * c];
                        for r in win[0]..win[1] {
                            axpy(&mut d[r * c..(r + 1) * c], gs, scale);
                        }
                    }
                });
            }
            Op::SegmentMax { input, argmax } => {
                let c = self.shape(*input)[1];
                self.accumulate(grads, *input, |d| {
                    for (slot, &row) in argmax.iter().enumerate() {
                        if row != usize::MAX {
                            d[row * c + slot % c] += gd[slot];
                        }
                    }
                });
            }
            Op::SegmentSoftmax { input, offsets } => {
                let c = self.shape(*input)[1];
                self.accumulate(grads, *input, |d| {
                    for win in offsets.windows(2) {
                        for col in 0..c {
                            let mut dot = T::zero();
                            for r in win[0]..win[1] {
                                dot += gd[r * c + col] * out[r * c + col];
                            }
                            for r in win[0]..win[1] {
                                let i = r * c + col;
                                d[i] += out[i] * (gd[i] - dot);
                            }
                        }
                    }
                });
            }
            Op::ScaleRows { input, weights } => {
                let c = self.shape(*input)[1];
                let xv = self.value(*input).data();
                let wv = self.value(*weights).data();
                self.accumulate(grads, *input, |d| {
                    for (r, w) in wv.iter().enumerate() {
                        axpy(&mut d[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c], *w);
                    }
                });
                self.accumulate(grads, *weights, |d| {
                    for (r, dw) in d.iter_mut().enumerate() {
                        let row = r * c..(r + 1) * c;
                        *dw += gd[row.clone()].iter().zip(&xv[row]).map(|(g, x)| *g * *x).sum::<T>();
                    }
                });
            }
            Op::SliceCols { input, start } => {
                let c = self.shape(*input)[1];
                let len = node.value.shape()[1];
                self.accumulate(grads, *input, |d| {
                    for (r, gr) in gd.chunks_exact(len).enumerate() {
                        let dst = r * c + start;
                        axpy(&mut d[dst..dst + len], gr, T::one());
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let t = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(t.data_mut());
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

pub(crate) fn axpy<T: Scalar>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * *s;
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materialized as zeros when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}
