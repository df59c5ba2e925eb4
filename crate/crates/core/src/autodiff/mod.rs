//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in execution order. Values live on the
//! tape and are referred to through copyable [`Var`] handles. Calling
//! [`Tape::backward`] walks the record in exact reverse order and returns the
//! gradients of every variable that (transitively) requires one.
//!
//! The operator set is deliberately small: it is exactly what the denoising
//! network and its attention blocks need.

mod conv;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{cst, Element, Tensor};

use conv::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ChannelMean(Var),
    ChannelMax { x: Var, argmax: Vec<usize> },
    SumAxis { x: Var, axis: usize, scale: f64 },
    ConcatChannels(Vec<Var>),
    Softmax(Var),
    Mse(Var, Var),
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Execution record for one forward/backward pair.
///
/// A tape is single-threaded; run one tape per worker for parallel evaluation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let rg = self.any_grad(parents);
        Ok(self.push(value, op, rg))
    }

    /// Stride-1 convolution with `pad` zeros on every side; `pad = 0` is a
    /// valid convolution.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geom = conv::conv2d_geom(xv, wv, bv, pad)?;
        let out = conv::conv2d_forward(xv, wv, bv, pad)?;
        self.record(out, Op::Conv2d { x, w, b, geom }, &[x, w, b], "conv2d")
    }

    /// Convolution padded so the output keeps the input's spatial extent.
    /// Only odd kernels are accepted.
    pub fn conv2d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let k = self.value(w).dims4()?.3;
        if k % 2 == 0 {
            return Err(shape_err!("same padding needs an odd kernel, got {}", k));
        }
        self.conv2d(x, w, b, (k - 1) / 2)
    }

    /// Transposed stride-1 convolution; spatial extent grows by `k - 1`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geom = conv::conv_transpose2d_geom(xv, wv, bv)?;
        let out = conv::conv_transpose2d_forward(xv, wv, bv)?;
        self.record(
            out,
            Op::ConvTranspose2d { x, w, b, geom },
            &[x, w, b],
            "conv_transpose2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.record(out, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.record(out, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// Elementwise sum with broadcasting over axes of extent 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |p, q| p + q)?;
        self.record(out, Op::Add(a, b), &[a, b], "add")
    }

    /// Elementwise product with broadcasting over axes of extent 1.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |p, q| p * q)?;
        self.record(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f: T = cst(factor);
        let out = self.value(x).map(|v| v * f);
        self.record(out, Op::Scale(x, factor), &[x], "scale")
    }

    /// Mean over the channel axis of a `[B, C, H, W]` tensor, keeping the axis.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if c == 0 {
            return Err(shape_err!("channel_mean over zero channels"));
        }
        let out = self.sum_axis_value(x, 1, 1.0 / c as f64, false)?;
        debug_assert_eq!(out.shape(), [b, 1, h, w]);
        self.record(out, Op::ChannelMean(x), &[x], "channel_mean")
    }

    /// Max over the channel axis of a `[B, C, H, W]` tensor, keeping the axis.
    /// The gradient is routed to the first maximal channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (b, c, h, w) = xv.dims4()?;
        if c == 0 {
            return Err(shape_err!("channel_max over zero channels"));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * plane);
        let mut argmax = Vec::with_capacity(b * plane);
        let d = xv.data();
        for bi in 0..b {
            let base = bi * c * plane;
            for p in 0..plane {
                let mut best = d[base + p];
                let mut best_c = 0;
                for ci in 1..c {
                    let v = d[base + ci * plane + p];
                    if v > best {
                        best = v;
                        best_c = ci;
                    }
                }
                out.push(best);
                argmax.push(base + best_c * plane + p);
            }
        }
        let out = Tensor::new(vec![b, 1, h, w], out)?;
        self.record(out, Op::ChannelMax { x, argmax }, &[x], "channel_max")
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.sum_axis_value(x, axis, 1.0, false)?;
        self.record(out, Op::SumAxis { x, axis, scale: 1.0 }, &[x], "sum_axis")
    }

    /// Like [`Tape::sum_axis`], but each output adds its terms in ascending
    /// order, so the result is bit-identical under any permutation of the
    /// entries along `axis`.
    pub fn sum_axis_sorted(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.sum_axis_value(x, axis, 1.0, true)?;
        self.record(out, Op::SumAxis { x, axis, scale: 1.0 }, &[x], "sum_axis_sorted")
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .value(x)
            .shape()
            .get(axis)
            .ok_or_else(|| shape_err!("mean over missing axis {}", axis))?;
        if n == 0 {
            return Err(shape_err!("mean over empty axis {}", axis));
        }
        let scale = 1.0 / n as f64;
        let out = self.sum_axis_value(x, axis, scale, false)?;
        self.record(out, Op::SumAxis { x, axis, scale }, &[x], "mean_axis")
    }

    fn sum_axis_value(&self, x: Var, axis: usize, scale: f64, sorted: bool) -> Result<Tensor<T>> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(shape_err!("axis {} out of range for {:?}", axis, shape));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let d = xv.data();
        if sorted {
            let mut terms = Vec::with_capacity(n);
            for o in 0..outer {
                for i in 0..inner {
                    terms.clear();
                    terms.extend((0..n).map(|a| d[(o * n + a) * inner + i]));
                    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                    out[o * inner + i] = terms.iter().fold(T::zero(), |acc, &v| acc + v);
                }
            }
        }
        for o in 0..outer * usize::from(!sorted) {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..n {
                let src = &d[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (acc, &v) in dst.iter_mut().zip(src) {
                    *acc = *acc + v;
                }
            }
        }
        let s: T = cst(scale);
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v = *v * s);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        Tensor::new(out_shape, out)
    }

    /// Concatenation of rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let (b, _, h, w) = self.value(*first).dims4()?;
        let mut chans = Vec::with_capacity(parts.len());
        for p in parts {
            let (pb, pc, ph, pw) = self.value(*p).dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(shape_err!(
                    "concat_channels: {:?} vs {:?}",
                    self.value(*p).shape(),
                    self.value(*first).shape()
                ));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (p, &pc) in parts.iter().zip(&chans) {
                let d = self.value(*p).data();
                out.extend_from_slice(&d[bi * pc * plane..(bi + 1) * pc * plane]);
            }
        }
        let out = Tensor::new(vec![b, total, h, w], out)?;
        self.record(out, Op::ConcatChannels(parts.to_vec()), parts, "concat_channels")
    }

    /// Softmax of a rank-1 tensor, computed with max subtraction.
    pub fn softmax_1d(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(shape_err!("softmax_1d on shape {:?}", xv.shape()));
        }
        let out = Tensor::new(xv.shape().to_vec(), softmax(xv.data())?)?;
        self.record(out, Op::Softmax(x), &[x], "softmax_1d")
    }

    /// Mean squared error between equally shaped tensors, as a scalar.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err!("mse_loss: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        if av.is_empty() {
            return Err(shape_err!("mse_loss on empty tensors"));
        }
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| {
                let d = (p - q).to_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(cst(s / av.len() as f64));
        self.record(out, Op::Mse(a, b), &[a, b], "mse_loss")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, Op::SumAll(x), &[x], "sum")
    }

    /// Fingerprint of every piecewise branch taken in this forward pass
    /// (ReLU activity and channel-max winners). Two passes with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        feed(u64::from(v > T::zero()));
                    }
                }
                Op::ChannelMax { argmax, .. } => argmax.iter().for_each(|&i| feed(i as u64)),
                _ => {}
            }
        }
        h
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// A tape can be differentiated once; record a fresh forward pass for the
    /// next step.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Autodiff(
                "backward already ran on this tape; re-run the forward pass".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff("loss variable is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.value(loss).shape().to_vec();
        grads[loss.0] = Some(Tensor::ones(seed_shape));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            // Only leaf gradients are kept; intermediate buffers are released.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    conv::conv2d_backward(self.value(*x), self.value(*w), *geom, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    conv::conv_transpose2d_backward(self.value(*x), self.value(*w), *geom, g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = g.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d = *d * s * (T::one() - s);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.requires_grad(v) {
                        let dv = reduce_to(g, self.value(v).shape(), |gi, _| gi, None);
                        self.accumulate(grads, v, dv);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (&v, &other) in [(a, b), (b, a)] {
                    if self.requires_grad(v) {
                        let dv = reduce_to(
                            g,
                            self.value(v).shape(),
                            |gi, o| gi * o,
                            Some(self.value(other)),
                        );
                        self.accumulate(grads, v, dv);
                    }
                }
            }
            Op::Scale(x, f) => {
                let f: T = cst(*f);
                self.accumulate(grads, *x, g.map(|v| v * f));
            }
            Op::ChannelMean(x) => {
                let c = self.value(*x).shape()[1];
                let dx = expand_axis(g, self.value(*x).shape(), 1, cst(1.0 / c as f64));
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelMax { x, argmax } => {
                let mut dx = Tensor::zeros_like(self.value(*x));
                let d = dx.data_mut();
                for (&pos, &gv) in argmax.iter().zip(g.data()) {
                    d[pos] = d[pos] + gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAxis { x, axis, scale } => {
                let dx = expand_axis(g, self.value(*x).shape(), *axis, cst(*scale));
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatChannels(parts) => {
                let (b, total, h, w) = node.value.dims4().expect("rank-4 concat");
                let plane = h * w;
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).shape()[1];
                    if self.requires_grad(*p) {
                        let mut dp = Vec::with_capacity(b * pc * plane);
                        for bi in 0..b {
                            let start = (bi * total + offset) * plane;
                            dp.extend_from_slice(&g.data()[start..start + pc * plane]);
                        }
                        let dp = Tensor::new(vec![b, pc, h, w], dp).expect("concat grad");
                        self.accumulate(grads, *p, dp);
                    }
                    offset += pc;
                }
            }
            Op::Softmax(x) => {
                let s = node.value.data();
                let inner: T = s.iter().zip(g.data()).map(|(&si, &gi)| si * gi).sum();
                let dx = Tensor::new(
                    node.value.shape().to_vec(),
                    s.iter()
                        .zip(g.data())
                        .map(|(&si, &gi)| si * (gi - inner))
                        .collect(),
                )
                .expect("softmax grad");
                self.accumulate(grads, *x, dx);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k: T = g.data()[0] * cst(2.0 / av.len() as f64);
                let diff: Vec<T> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&p, &q)| (p - q) * k)
                    .collect();
                let da = Tensor::new(av.shape().to_vec(), diff).expect("mse grad");
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, da.map(|v| T::zero() - v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::SumAll(x) => {
                let g0 = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), g0));
            }
        }
    }
}

#[inline]
fn sigmoid<T: Element>(v: T) -> T {
    // Evaluated on the stable branch for either sign.
    if v >= T::zero() {
        T::one() / (T::one() + (T::zero() - v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax of a finite, non-empty slice.
pub fn softmax<T: Element>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(shape_err!("softmax of an empty vector"));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let m = x.iter().copied().fold(x[0], |a, b| a.max_val(b));
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Row-major strides of `shape`, with zero stride on axes broadcast to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&p, &q)| match (p, q) {
            _ if p == q => Ok(p),
            (1, q) => Ok(q),
            (p, 1) => Ok(p),
            _ => Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let last = rank.saturating_sub(1);
    let inner = if rank == 0 { 1 } else { out[last] };
    let (ia, ib) = if rank == 0 { (0, 0) } else { (sa[last], sb[last]) };
    let mut i = 0;
    while i < n {
        for j in 0..inner {
            f(i + j, oa + j * ia, ob + j * ib);
        }
        i += inner;
        // Advance the outer multi-index.
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

/// Sums `f(g, other)` over the axes along which `target` was broadcast.
fn reduce_to<T: Element>(
    g: &Tensor<T>,
    target: &[usize],
    f: impl Fn(T, T) -> T,
    other: Option<&Tensor<T>>,
) -> Tensor<T> {
    let out = g.shape();
    let st = broadcast_strides(target, out);
    let mut acc = vec![T::zero(); target.iter().product()];
    let gd = g.data();
    match other {
        Some(o) => {
            let so = broadcast_strides(o.shape(), out);
            let od = o.data();
            for_each_broadcast(out, &st, &so, |i, it, io| acc[it] = acc[it] + f(gd[i], od[io]));
        }
        None => {
            for_each_broadcast(out, &st, &st, |i, it, _| acc[it] = acc[it] + f(gd[i], T::one()));
        }
    }
    Tensor::new(target.to_vec(), acc).expect("reduced gradient shape")
}

/// Repeats `g` (extent 1 on `axis`) along `axis` to `shape`, scaled by `scale`.
fn expand_axis<T: Element>(g: &Tensor<T>, shape: &[usize], axis: usize, scale: T) -> Tensor<T> {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let gd = g.data();
    let mut out = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let src = &gd[o * inner..(o + 1) * inner];
        for _ in 0..n {
            out.extend(src.iter().map(|&v| v * scale));
        }
    }
    Tensor::new(shape.to_vec(), out).expect("expanded gradient shape")
}
