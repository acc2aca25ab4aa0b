//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and the backward sweep simply walks it in reverse.

use std::collections::HashMap;

use super::kernels::{self, Conv2dGeom, Conv3dGeom, MaskType, Padding, Tap};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::quant;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, geom: Conv2dGeom },
    ConvTranspose2d { x: Var, w: Var, geom: Conv2dGeom },
    Conv3d { x: Var, w: Var, geom: Conv3dGeom, taps: Vec<Tap> },
    AddBias { x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    PowClamped { x: Var, exponent: T, floor: T },
    Clamp { x: Var, lo: T, hi: T },
    LnFloor { x: Var, floor: T },
    StopGradient,
    Concat(Vec<Var>),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanPerItem(Var),
    AvgPool2(Var),
    Window { x: Var, taps: Vec<T> },
    Gather { x: Var, index: Vec<usize> },
    SoftQuantize { z: Var, c: Var, sigma: T },
    StraightThrough { z: Var, c: Var, sigma: T },
    ExpandImportance { d: Var, k: usize },
    ToDepth(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of a node's value; used for scalar losses.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Input leaf. Gradients flow into it and can be read with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same node so
    /// every use of a shared parameter accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).tensor.clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, dilation: usize, padding: Padding) -> Result<Var> {
        let geom = Conv2dGeom::new(self.shape(x), self.shape(w), stride, dilation, padding)?;
        let y = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let out = Tensor::new(geom.output_shape().to_vec(), y)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom }))
    }

    /// Adjoint of the same-padded, stride-`stride` conv2d sharing kernel `w`
    /// (`[kh,kw,Cout,Cin]` with `Cin` the channel count of `x`).
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        if !(stride == 2 || stride == 4) {
            return Err(Error::InvalidArgument(format!("conv_transpose2d stride must be 2 or 4, got {stride}")));
        }
        let geom = Conv2dGeom::transpose_of(self.shape(x), self.shape(w), stride)?;
        let y = kernels::conv2d_backward_input(self.value(x).data(), self.value(w).data(), &geom);
        let out = Tensor::new(geom.input_shape().to_vec(), y)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, geom }))
    }

    pub fn conv3d_masked(&mut self, x: Var, w: Var, mask: MaskType) -> Result<Var> {
        let geom = Conv3dGeom::new(self.shape(x), self.shape(w))?;
        let ks = self.shape(w);
        let taps = kernels::causal_taps(ks[0], ks[1], ks[2], mask)?;
        let y = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), &taps, &geom);
        let out = Tensor::new(vec![geom.batch, geom.d, geom.h, geom.w, geom.cout], y)?;
        Ok(self.push(out, Op::Conv3d { x, w, geom, taps }))
    }

    /// Adds a per-channel bias along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).channels();
        if self.shape(b) != [c] {
            return Err(Error::shape("add_bias", format!("{:?} vs bias {:?}", self.shape(x), self.shape(b))));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &bv) in chunk.iter_mut().zip(&bias) {
                *o = *o + bv;
            }
        }
        Ok(self.push(out, Op::AddBias { x, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { v * slope }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// `max(x, floor)^exponent`; zero gradient where the floor is active.
    pub fn pow_clamped(&mut self, x: Var, exponent: T, floor: T) -> Var {
        self.unary(x, |v| v.max(floor).powf(exponent), Op::PowClamped { x, exponent, floor })
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// Natural log with an epsilon floor on its argument.
    pub fn ln_floor(&mut self, x: Var, floor: T) -> Var {
        self.unary(x, |v| v.max(floor).ln(), Op::LnFloor { x, floor })
    }

    /// Identity in value; blocks every gradient through this edge.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGradient)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", self.shape(first), s)));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec())))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.channels();
        let mut out = Tensor::zeros(t.shape());
        for (row, o) in t.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            kernels::softmax_row(row, o);
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean over every axis but the first: `[B, ...] -> [B]`.
    pub fn mean_per_item(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let b = t.shape()[0];
        let per = t.len() / b;
        let n = T::of(per as f64);
        let data = t.data().chunks(per).map(|c| c.iter().copied().sum::<T>() / n).collect();
        let out = Tensor::new(vec![b], data).expect("shape");
        self.push(out, Op::MeanPerItem(x))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::shape("avg_pool2", format!("need [B,H>=2,W>=2,C], got {s:?}")));
        }
        let y = kernels::avg_pool2(self.value(x).data(), &s);
        let out = Tensor::new(vec![s[0], s[1] / 2, s[2] / 2, s[3]], y)?;
        Ok(self.push(out, Op::AvgPool2(x)))
    }

    /// Separable depthwise window filter (valid borders) with the given 1D taps.
    pub fn window_filter(&mut self, x: Var, taps: &[T]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = taps.len();
        if s.len() != 4 || s[1] < k || s[2] < k {
            return Err(Error::shape("window_filter", format!("window {k} does not fit input {s:?}")));
        }
        let y = kernels::window_filter(self.value(x).data(), &s, taps);
        let out = Tensor::new(vec![s[0], s[1] + 1 - k, s[2] + 1 - k, s[3]], y)?;
        Ok(self.push(out, Op::Window { x, taps: taps.to_vec() }))
    }

    pub fn windowed_mean(&mut self, x: Var, taps: &[T]) -> Result<Var> {
        self.window_filter(x, taps)
    }

    /// `E[x^2] - E[x]^2` over each window.
    pub fn windowed_variance(&mut self, x: Var, taps: &[T]) -> Result<Var> {
        self.windowed_covariance(x, x, taps)
    }

    /// `E[xy] - E[x]E[y]` over each window.
    pub fn windowed_covariance(&mut self, x: Var, y: Var, taps: &[T]) -> Result<Var> {
        let xy = self.mul(x, y)?;
        let exy = self.window_filter(xy, taps)?;
        let mx = self.window_filter(x, taps)?;
        let my = if x == y { mx } else { self.window_filter(y, taps)? };
        let mm = self.mul(mx, my)?;
        self.sub(exy, mm)
    }

    /// Picks `x[..., index[i]]` for every row `i` of the last axis.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let l = t.channels();
        let rows = t.len() / l;
        if index.len() != rows {
            return Err(Error::shape("gather", format!("{} indices for {rows} rows", index.len())));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &i) in index.iter().enumerate() {
            if i >= l {
                return Err(Error::SymbolOutOfRange { index: i, levels: l });
            }
            data.push(t.data()[r * l + i]);
        }
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather { x, index }))
    }

    /// Elementwise soft quantization of `z` against centers `c`.
    pub fn soft_quantize(&mut self, z: Var, c: Var, sigma: T) -> Var {
        let centers = self.value(c).data().to_vec();
        let mut probs = vec![T::zero(); centers.len()];
        let zt = self.value(z);
        let out = Tensor::from_fn(zt.shape(), |i| quant::soft_quantize_with(zt.data()[i], &centers, sigma, &mut probs));
        self.push(out, Op::SoftQuantize { z, c, sigma })
    }

    /// Hard-forward / soft-backward quantization. The value is exactly the
    /// nearest center; the gradient is that of [`Graph::soft_quantize`].
    /// Returns the value node and the chosen center indices.
    pub fn straight_through(&mut self, z: Var, c: Var, sigma: T) -> (Var, Vec<usize>) {
        let centers = self.value(c).data().to_vec();
        let zt = self.value(z);
        let mut idx = Vec::with_capacity(zt.len());
        let out = Tensor::from_fn(zt.shape(), |i| {
            let (j, v) = quant::nearest_center(zt.data()[i], &centers);
            idx.push(j);
            v
        });
        (self.push(out, Op::StraightThrough { z, c, sigma }), idx)
    }

    /// `[B,M,N,1] -> [B,M,N,K]` with channel `k` equal to `clip(d*K - k, 0, 1)`.
    pub fn expand_importance(&mut self, d: Var, k: usize) -> Result<Var> {
        let s = self.shape(d).to_vec();
        if s.last() != Some(&1) || k == 0 {
            return Err(Error::shape("expand_importance", format!("need [..,1] map and K >= 1, got {s:?}, K={k}")));
        }
        let kk = T::of(k as f64);
        let mut data = Vec::with_capacity(self.value(d).len() * k);
        for &v in self.value(d).data() {
            for ch in 0..k {
                data.push((v * kk - T::of(ch as f64)).max(T::zero()).min(T::one()));
            }
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = k;
        Ok(self.push(Tensor::new(shape, data)?, Op::ExpandImportance { d, k }))
    }

    /// `[B,M,N,K] -> [B,K,M,N,1]`: feature maps become the depth axis of the
    /// context model.
    pub fn to_depth(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("to_depth", format!("need [B,M,N,K], got {s:?}")));
        }
        let (b, m, n, k) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for bi in 0..b {
            for mi in 0..m {
                for ni in 0..n {
                    for ki in 0..k {
                        data[((bi * k + ki) * m + mi) * n + ni] = src[((bi * m + mi) * n + ni) * k + ki];
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, k, m, n, 1], data)?, Op::ToDepth(x)))
    }

    /// Reverse sweep from a scalar node, seeding its gradient with one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::ones(self.value(loss).shape());
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape().to_vec(), data).expect("grad shape");
        match &node.op {
            Op::Leaf | Op::Param | Op::StopGradient => {}
            Op::Conv2d { x, w, geom } => {
                acc(*x, like(*x, kernels::conv2d_backward_input(g.data(), val(*w).data(), geom)));
                acc(*w, like(*w, kernels::conv2d_backward_kernel(val(*x).data(), g.data(), geom)));
            }
            Op::ConvTranspose2d { x, w, geom } => {
                acc(*x, like(*x, kernels::conv2d_forward(g.data(), val(*w).data(), geom)));
                acc(*w, like(*w, kernels::conv2d_backward_kernel(g.data(), val(*x).data(), geom)));
            }
            Op::Conv3d { x, w, geom, taps } => {
                acc(*x, like(*x, kernels::conv3d_backward_input(g.data(), val(*w).data(), taps, geom)));
                let n = val(*w).len();
                acc(*w, like(*w, kernels::conv3d_backward_kernel(val(*x).data(), g.data(), taps, geom, n)));
            }
            Op::AddBias { x, b } => {
                let c = val(*b).len();
                let mut db = vec![T::zero(); c];
                for chunk in g.data().chunks(c) {
                    for (d, &v) in db.iter_mut().zip(chunk) {
                        *d = *d + v;
                    }
                }
                acc(*x, g.clone());
                acc(*b, like(*b, db));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |d, y| d * y));
                acc(*b, g.zip_map(val(*a), |d, x| d * x));
            }
            Op::Div(a, b) => {
                acc(*a, g.zip_map(val(*b), |d, y| d / y));
                let q = node.value.zip_map(val(*b), |q, y| q / y);
                acc(*b, g.zip_map(&q, |d, r| -d * r));
            }
            Op::Scale(x, s) => {
                let s = *s;
                acc(*x, g.map(|d| d * s));
            }
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Relu(x) => acc(*x, g.zip_map(val(*x), |d, v| if v > T::zero() { d } else { T::zero() })),
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                acc(*x, g.zip_map(val(*x), |d, v| if v > T::zero() { d } else { d * s }))
            }
            Op::Sigmoid(x) => acc(*x, g.zip_map(&node.value, |d, y| d * y * (T::one() - y))),
            Op::Tanh(x) => acc(*x, g.zip_map(&node.value, |d, y| d * (T::one() - y * y))),
            Op::Abs(x) => acc(*x, g.zip_map(val(*x), |d, v| if v == T::zero() { T::zero() } else { d * v.signum() })),
            Op::PowClamped { x, exponent, floor } => {
                let (e, f) = (*exponent, *floor);
                acc(*x, g.zip_map(val(*x), |d, v| if v > f { d * e * v.powf(e - T::one()) } else { T::zero() }))
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                acc(*x, g.zip_map(val(*x), |d, v| if v >= lo && v <= hi { d } else { T::zero() }))
            }
            Op::LnFloor { x, floor } => {
                let f = *floor;
                acc(*x, g.zip_map(val(*x), |d, v| if v > f { d / v } else { T::zero() }))
            }
            Op::Concat(parts) => {
                let total = node.value.channels();
                let rows = node.value.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = val(p).channels();
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    acc(p, like(p, data));
                    off += w;
                }
            }
            Op::Softmax(x) => {
                let c = node.value.channels();
                let mut dx = Vec::with_capacity(node.value.len());
                for (y, d) in node.value.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: T = y.iter().zip(d).map(|(&a, &b)| a * b).sum();
                    dx.extend(y.iter().zip(d).map(|(&a, &b)| a * (b - dot)));
                }
                acc(*x, like(*x, dx));
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::Mean(x) => {
                let n = T::of(val(*x).len() as f64);
                acc(*x, Tensor::full(val(*x).shape(), g.data()[0] / n))
            }
            Op::MeanPerItem(x) => {
                let t = val(*x);
                let per = t.len() / t.shape()[0];
                let n = T::of(per as f64);
                acc(*x, Tensor::from_fn(t.shape(), |i| g.data()[i / per] / n))
            }
            Op::AvgPool2(x) => acc(*x, like(*x, kernels::avg_pool2_backward(g.data(), val(*x).shape()))),
            Op::Window { x, taps } => {
                acc(*x, like(*x, kernels::window_filter_backward(g.data(), val(*x).shape(), taps)))
            }
            Op::Gather { x, index } => {
                let l = val(*x).channels();
                let mut dx = vec![T::zero(); val(*x).len()];
                for (r, (&j, &d)) in index.iter().zip(g.data()).enumerate() {
                    dx[r * l + j] = d;
                }
                acc(*x, like(*x, dx));
            }
            Op::SoftQuantize { z, c, sigma } | Op::StraightThrough { z, c, sigma } => {
                let centers = val(*c).data();
                let mut dz = Vec::with_capacity(g.len());
                let mut dc = vec![T::zero(); centers.len()];
                let mut probs = vec![T::zero(); centers.len()];
                let mut local = vec![T::zero(); centers.len()];
                for (&zv, &d) in val(*z).data().iter().zip(g.data()) {
                    let dzv = quant::soft_quantize_grad_with(zv, centers, *sigma, &mut probs, &mut local);
                    dz.push(d * dzv);
                    for (a, &l) in dc.iter_mut().zip(&local) {
                        *a = *a + d * l;
                    }
                }
                acc(*z, like(*z, dz));
                acc(*c, like(*c, dc));
            }
            Op::ExpandImportance { d, k } => {
                let kk = T::of(*k as f64);
                let dd = val(*d)
                    .data()
                    .iter()
                    .zip(g.data().chunks(*k))
                    .map(|(&v, gs)| {
                        let mut s = T::zero();
                        for (ch, &gv) in gs.iter().enumerate() {
                            let a = v * kk - T::of(ch as f64);
                            if a >= T::zero() && a <= T::one() {
                                s = s + gv * kk;
                            }
                        }
                        s
                    })
                    .collect();
                acc(*d, like(*d, dd));
            }
            Op::ToDepth(x) => {
                let s = val(*x).shape();
                let (b, m, n, k) = (s[0], s[1], s[2], s[3]);
                let mut dx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for mi in 0..m {
                        for ni in 0..n {
                            for ki in 0..k {
                                dx[((bi * m + mi) * n + ni) * k + ki] = g.data()[((bi * k + ki) * m + mi) * n + ni];
                            }
                        }
                    }
                }
                acc(*x, like(*x, dx));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Writes parameter gradients into the store, clearing stale ones.
    pub fn store_into(&self, store: &mut ParamStore<T>) {
        store.clear_grads();
        for (&id, &v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.get_mut(id).grad = Some(g.clone());
            }
        }
    }
}
