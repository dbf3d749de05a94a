//! Forward definitions of the differentiable primitives.
//!
//! Spatial tensors are laid out height × width × channels. There is no
//! implicit broadcasting; the only mixed-shape primitives are
//! [`Tape::add_bias`] and [`Tape::scale_rows`], which state their alignment
//! explicitly.

use super::tape::{Conv2dSaved, Op};
use super::{split_axis, Scalar, Tape, Tensor, Var};
use crate::error::TensorError;
use crate::tensor::gemm::{gemm, Transpose};

pub(crate) const L2_EPS: f64 = 1e-12;

type R = Result<Var, TensorError>;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != axis)
        .map(|(_, v)| *v)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn validate_offsets(op: &'static str, offsets: &[usize], rows: usize) -> Result<(), TensorError> {
    if offsets.first() != Some(&0) || offsets.last() != Some(&rows) {
        return Err(invalid(op, format!("offsets must span 0..{rows}")));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid(op, "offsets must be non-decreasing"));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> R {
        self.binary_same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> R {
        self.binary_same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> R {
        self.binary_same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a))
    }

    /// (m×k) · (k×n) → m×n.
    pub fn matmul(&mut self, a: Var, b: Var) -> R {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Transpose::No,
            self.value(b).data(),
            Transpose::No,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// Adds a length-C vector to every C-wide row of `x` (last axis).
    pub fn add_bias(&mut self, x: Var, b: Var) -> R {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(mismatch("add_bias", sx, sb));
        }
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_exact_mut(bv.len()) {
            for (r, b) in row.iter_mut().zip(&bv) {
                *r += *b;
            }
        }
        Ok(self.push(v, Op::AddBias(x, b)))
    }

    /// Zero-padded 2-D convolution of an H×W×Cin input with a k×k×Cin×Cout
    /// kernel, padding `k / 2`, via im2col and a single matrix product.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize) -> R {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 3
            || sw.len() != 4
            || sw[0] != sw[1]
            || sw[0] % 2 == 0
            || sw[2] != si[2]
            || !(stride == 1 || stride == 2)
        {
            return Err(mismatch("conv2d", si, sw));
        }
        let ksize = sw[0];
        let pad = ksize / 2;
        let (in_h, in_w, cin, cout) = (si[0], si[1], si[2], sw[3]);
        let out_h = (in_h + 2 * pad - ksize) / stride + 1;
        let out_w = (in_w + 2 * pad - ksize) / stride + 1;
        let mut saved = Conv2dSaved {
            stride,
            pad,
            ksize,
            in_h,
            in_w,
            cin,
            out_h,
            out_w,
            cout,
            cols: Vec::new(),
        };
        saved.cols = im2col(&saved, self.value(input).data());
        let p = out_h * out_w;
        let kk = ksize * ksize * cin;
        let mut out = vec![T::zero(); p * cout];
        gemm(
            p,
            kk,
            cout,
            &saved.cols,
            Transpose::No,
            self.value(weight).data(),
            Transpose::No,
            &mut out,
            false,
        );
        let value = Tensor::from_parts(vec![out_h, out_w, cout], out);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                saved: Box::new(saved),
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> R {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).fold(T::neg_infinity(), |m, j| m.max(x[at(j)]));
                let mut z = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(a, axis)))
    }

    fn reduce(&self, op: &'static str, a: Var, axis: usize) -> Result<(Vec<T>, Vec<usize>), TensorError> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(invalid(op, format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + j) * inner + i];
                }
            }
        }
        Ok((out, reduced_shape(shape, axis)))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> R {
        let (out, shape) = self.reduce("sum", a, axis)?;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Sum(a, axis)))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> R {
        let (mut out, shape) = self.reduce("mean", a, axis)?;
        let n = T::from_f64(self.shape(a)[axis] as f64);
        out.iter_mut().for_each(|v| *v = *v / n);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mean(a, axis)))
    }

    /// Maximum along `axis`; ties resolve to the lowest index, which is the
    /// only element that receives gradient.
    pub fn max(&mut self, a: Var, axis: usize) -> R {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("max", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                for j in 1..len {
                    if x[(o * len + j) * inner + i] > x[(o * len + best) * inner + i] {
                        best = j;
                    }
                }
                out[o * inner + i] = x[(o * len + best) * inner + i];
                argmax[o * inner + i] = best;
            }
        }
        let value = Tensor::from_parts(reduced_shape(&shape, axis), out);
        Ok(self.push(
            value,
            Op::Max {
                input: a,
                axis,
                argmax,
            },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, v| acc + *v);
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().fold(T::zero(), |acc, v| acc + *v) / T::from_f64(x.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> R {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis];
                let d = self.value(*v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(inputs.to_vec(), axis)))
    }

    /// Nearest-neighbour ×2 upsampling of an H×W×C tensor.
    pub fn upsample2x(&mut self, a: Var) -> R {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(invalid("upsample2x", format!("expected H×W×C, got {shape:?}")));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(4 * x.len());
        for y in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((y / 2) * w + xx / 2) * c;
                out.extend_from_slice(&x[src..src + c]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![2 * h, 2 * w, c], out), Op::Upsample2x(a)))
    }

    /// Bilinear lookup of an H×W×C grid at P continuous pixel coordinates
    /// (P×2, x then y). Texel `(r, c)` is centred at pixel coordinate
    /// `(c + 0.5, r + 0.5)`; lookups outside the centres clamp to the border.
    pub fn bilinear_sample(&mut self, grid: Var, coords: Var) -> R {
        let (sg, sc) = (self.shape(grid).to_vec(), self.shape(coords).to_vec());
        if sg.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(mismatch("bilinear_sample", &sg, &sc));
        }
        let (h, w, c) = (sg[0], sg[1], sg[2]);
        let gv = self.value(grid).data();
        let cv = self.value(coords).data();
        let mut out = vec![T::zero(); sc[0] * c];
        for (p, xy) in cv.chunks_exact(2).enumerate() {
            let taps = bilinear_taps(xy[0], xy[1], h, w);
            let dst = &mut out[p * c..(p + 1) * c];
            for (idx, wt) in taps.taps() {
                super::tape::axpy(dst, &gv[idx * c..(idx + 1) * c], wt);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![sc[0], c], out),
            Op::Bilinear { grid, coords },
        ))
    }

    /// Full contraction of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> R {
        self.binary_same_shape("dot", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .fold(T::zero(), |acc, (x, y)| acc + *x * *y);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    /// Normalizes every vector along the last axis to unit length.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = *x.shape().last().unwrap();
        let eps = T::from_f64(L2_EPS);
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
        self.push(out, Op::L2Normalize(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> R {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Row `i` of the result is row `index[i]` of the N×C input.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> R {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(invalid("gather_rows", format!("expected N×C, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(bad) = index.iter().find(|i| **i >= n) {
            return Err(invalid("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        if index.is_empty() {
            return Err(invalid("gather_rows", "empty index"));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![index.len(), c], out),
            Op::GatherRows { input: a, index },
        ))
    }

    /// Places row `i` of the M×C input at row `index[i]` of a zero
    /// `rows`×C result. Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, index: Vec<usize>, rows: usize) -> R {
        let shape = self.shape(a);
        if shape.len() != 2 || shape[0] != index.len() {
            return Err(invalid(
                "scatter_rows",
                format!("{} indices for input {shape:?}", index.len()),
            ));
        }
        let c = shape[1];
        let mut seen = vec![false; rows];
        let mut out = vec![T::zero(); rows * c];
        let x = self.value(a).data();
        for (r, &dst) in index.iter().enumerate() {
            if dst >= rows || std::mem::replace(&mut seen[dst], true) {
                return Err(invalid("scatter_rows", format!("bad or repeated target row {dst}")));
            }
            out[dst * c..(dst + 1) * c].copy_from_slice(&x[r * c..(r + 1) * c]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], out),
            Op::ScatterRows { input: a, index },
        ))
    }

    fn segment_reduce(&self, op: &'static str, a: Var, offsets: &[usize]) -> Result<(usize, Vec<T>), TensorError> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(invalid(op, format!("expected N×C, got {shape:?}")));
        }
        validate_offsets(op, offsets, shape[0])?;
        let c = shape[1];
        let x = self.value(a).data();
        let mut out = vec![T::zero(); (offsets.len() - 1) * c];
        for (s, win) in offsets.windows(2).enumerate() {
            let dst = &mut out[s * c..(s + 1) * c];
            for r in win[0]..win[1] {
                super::tape::axpy(dst, &x[r * c..(r + 1) * c], T::one());
            }
        }
        Ok((c, out))
    }

    /// Per-segment column sums; segment `s` spans rows `offsets[s]..offsets[s+1]`.
    pub fn segment_sum(&mut self, a: Var, offsets: Vec<usize>) -> R {
        let (c, out) = self.segment_reduce("segment_sum", a, &offsets)?;
        let value = Tensor::from_parts(vec![offsets.len() - 1, c], out);
        Ok(self.push(value, Op::SegmentSum { input: a, offsets }))
    }

    /// Per-segment column means; empty segments yield zero rows.
    pub fn segment_mean(&mut self, a: Var, offsets: Vec<usize>) -> R {
        let (c, mut out) = self.segment_reduce("segment_mean", a, &offsets)?;
        for (s, win) in offsets.windows(2).enumerate() {
            let n = win[1] - win[0];
            if n > 0 {
                let inv = T::one() / T::from_f64(n as f64);
                out[s * c..(s + 1) * c].iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        let value = Tensor::from_parts(vec![offsets.len() - 1, c], out);
        Ok(self.push(value, Op::SegmentMean { input: a, offsets }))
    }

    /// Per-segment column maxima, lowest row winning ties; empty segments yield zero.
    pub fn segment_max(&mut self, a: Var, offsets: Vec<usize>) -> R {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(invalid("segment_max", format!("expected N×C, got {shape:?}")));
        }
        validate_offsets("segment_max", &offsets, shape[0])?;
        let c = shape[1];
        let x = self.value(a).data();
        let segs = offsets.len() - 1;
        let mut out = vec![T::zero(); segs * c];
        let mut argmax = vec![usize::MAX; segs * c];
        for (s, win) in offsets.windows(2).enumerate() {
            if win[0] == win[1] {
                continue;
            }
            for col in 0..c {
                let mut best = win[0];
                for r in win[0] + 1..win[1] {
                    if x[r * c + col] > x[best * c + col] {
                        best = r;
                    }
                }
                out[s * c + col] = x[best * c + col];
                argmax[s * c + col] = best;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![segs, c], out),
            Op::SegmentMax { input: a, argmax },
        ))
    }

    /// Column-wise softmax within each row segment.
    pub fn segment_softmax(&mut self, a: Var, offsets: Vec<usize>) -> R {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(invalid("segment_softmax", format!("expected N×C, got {shape:?}")));
        }
        validate_offsets("segment_softmax", &offsets, shape[0])?;
        let c = shape[1];
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for win in offsets.windows(2) {
            for col in 0..c {
                let m = (win[0]..win[1]).fold(T::neg_infinity(), |m, r| m.max(x[r * c + col]));
                let mut z = T::zero();
                for r in win[0]..win[1] {
                    let e = (x[r * c + col] - m).exp();
                    out[r * c + col] = e;
                    z += e;
                }
                for r in win[0]..win[1] {
                    out[r * c + col] = out[r * c + col] / z;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SegmentSoftmax { input: a, offsets },
        ))
    }

    /// Multiplies row `r` of an N×C input by `weights[r]` (weights N×1 or N).
    pub fn scale_rows(&mut self, a: Var, weights: Var) -> R {
        let (sa, sw) = (self.shape(a).to_vec(), self.shape(weights).to_vec());
        let n_w: usize = sw.iter().product();
        if sa.len() != 2 || n_w != sa[0] || !(sw.len() == 1 || (sw.len() == 2 && sw[1] == 1)) {
            return Err(mismatch("scale_rows", &sa, &sw));
        }
        let c = sa[1];
        let wv = self.value(weights).data();
        let mut out = self.value(a).clone();
        for (row, w) in out.data_mut().chunks_exact_mut(c).zip(wv) {
            row.iter_mut().for_each(|v| *v = *v * *w);
        }
        Ok(self.push(out, Op::ScaleRows { input: a, weights }))
    }

    /// Columns `start..start + len` of an N×C input.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> R {
        let shape = self.shape(a);
        if shape.len() != 2 || len == 0 || start + len > shape[1] {
            return Err(invalid(
                "slice_cols",
                format!("columns {start}..{} of {shape:?}", start + len),
            ));
        }
        let c = shape[1];
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(shape[0] * len);
        for row in x.chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let n = shape[0];
        Ok(self.push(
            Tensor::from_parts(vec![n, len], out),
            Op::SliceCols { input: a, start },
        ))
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn im2col<T: Scalar>(s: &Conv2dSaved<T>, input: &[T]) -> Vec<T> {
    let kk = s.ksize * s.ksize * s.cin;
    let mut cols = vec![T::zero(); s.out_h * s.out_w * kk];
    for oy in 0..s.out_h {
        for ox in 0..s.out_w {
            let row = &mut cols[(oy * s.out_w + ox) * kk..(oy * s.out_w + ox + 1) * kk];
            for dy in 0..s.ksize {
                let iy = (oy * s.stride + dy) as isize - s.pad as isize;
                if iy < 0 || iy >= s.in_h as isize {
                    continue;
                }
                for dx in 0..s.ksize {
                    let ix = (ox * s.stride + dx) as isize - s.pad as isize;
                    if ix < 0 || ix >= s.in_w as isize {
                        continue;
                    }
                    let src = (iy as usize * s.in_w + ix as usize) * s.cin;
                    let dst = (dy * s.ksize + dx) * s.cin;
                    row[dst..dst + s.cin].copy_from_slice(&input[src..src + s.cin]);
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(s: &Conv2dSaved<T>, dcols: &[T], dinput: &mut [T]) {
    let kk = s.ksize * s.ksize * s.cin;
    for oy in 0..s.out_h {
        for ox in 0..s.out_w {
            let row = &dcols[(oy * s.out_w + ox) * kk..(oy * s.out_w + ox + 1) * kk];
            for dy in 0..s.ksize {
                let iy = (oy * s.stride + dy) as isize - s.pad as isize;
                if iy < 0 || iy >= s.in_h as isize {
                    continue;
                }
                for dx in 0..s.ksize {
                    let ix = (ox * s.stride + dx) as isize - s.pad as isize;
                    if ix < 0 || ix >= s.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * s.in_w + ix as usize) * s.cin;
                    let src = (dy * s.ksize + dx) * s.cin;
                    super::tape::axpy(&mut dinput[dst..dst + s.cin], &row[src..src + s.cin], T::one());
                }
            }
        }
    }
}

/// The four texel taps of one bilinear lookup.
pub(crate) struct BilinearTaps<T> {
    idx: [usize; 4],
    wx: T,
    wy: T,
    /// Whether the coordinate lies strictly inside the clamped range on each axis.
    inside_x: bool,
    inside_y: bool,
}

impl<T: Scalar> BilinearTaps<T> {
    pub fn taps(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        let one = T::one();
        let w = [
            (one - self.wx) * (one - self.wy),
            self.wx * (one - self.wy),
            (one - self.wx) * self.wy,
            self.wx * self.wy,
        ];
        self.idx.iter().copied().zip(w)
    }

    /// Gradient of the sample w.r.t. the (x, y) coordinate, contracted with `g`.
    pub fn coord_grad(&self, grid: &[T], c: usize, g: &[T]) -> (T, T) {
        let one = T::one();
        let row = |i: usize| &grid[self.idx[i] * c..(self.idx[i] + 1) * c];
        let (v00, v01, v10, v11) = (row(0), row(1), row(2), row(3));
        let mut dx = T::zero();
        let mut dy = T::zero();
        for ch in 0..c {
            let ddx = (one - self.wy) * (v01[ch] - v00[ch]) + self.wy * (v11[ch] - v10[ch]);
            let ddy = (one - self.wx) * (v10[ch] - v00[ch]) + self.wx * (v11[ch] - v01[ch]);
            dx += g[ch] * ddx;
            dy += g[ch] * ddy;
        }
        (
            if self.inside_x { dx } else { T::zero() },
            if self.inside_y { dy } else { T::zero() },
        )
    }
}

/// Bilinear lookup of one H×W×C grid at a continuous pixel coordinate, with
/// the same texel centres and border clamping as [`Tape::bilinear_sample`].
pub fn bilinear_lookup<T: Scalar>(grid: &Tensor<T>, px: T, py: T) -> Vec<T> {
    let s = grid.shape();
    let c = s[2];
    let mut out = vec![T::zero(); c];
    for (idx, wt) in bilinear_taps(px, py, s[0], s[1]).taps() {
        super::tape::axpy(&mut out, &grid.data()[idx * c..(idx + 1) * c], wt);
    }
    out
}

pub(crate) fn bilinear_taps<T: Scalar>(px: T, py: T, h: usize, w: usize) -> BilinearTaps<T> {
    let half = T::from_f64(0.5);
    let axis = |p: T, n: usize| -> (usize, usize, T, bool) {
        let max = T::from_f64((n - 1) as f64);
        let u = p - half;
        let inside = u > T::zero() && u < max;
        let u = u.max(T::zero()).min(max);
        let i0 = u.floor().as_f64() as usize;
        let i0 = i0.min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - T::from_f64(i0 as f64), inside)
    };
    let (x0, x1, wx, inside_x) = axis(px, w);
    let (y0, y1, wy, inside_y) = axis(py, h);
    BilinearTaps {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wx,
        wy,
        inside_x,
        inside_y,
    }
}
