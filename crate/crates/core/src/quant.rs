//! Learnable scalar quantizers: soft assignment, hard nearest-center
//! quantization, the straight-through combination used in training,
//! importance-map channel masks, one-hot symbol tensors and de-quantization.

use crate::diff::{Graph, ParamId, ParamKind, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_LEVELS: usize = 8;

/// Softmax over `-sigma * (z - c_j)^2`, written into `out`.
pub fn soft_assign_into<T: Scalar>(z: T, centers: &[T], sigma: T, out: &mut [T]) {
    let mut hi = T::neg_infinity();
    for (o, &c) in out.iter_mut().zip(centers) {
        let d = z - c;
        *o = -sigma * d * d;
        hi = hi.max(*o);
    }
    let mut s = T::zero();
    for o in out.iter_mut() {
        *o = (*o - hi).exp();
        s = s + *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

pub fn soft_assign<T: Scalar>(z: T, centers: &[T], sigma: T) -> Vec<T> {
    let mut p = vec![T::zero(); centers.len()];
    soft_assign_into(z, centers, sigma, &mut p);
    p
}

pub(crate) fn soft_quantize_with<T: Scalar>(z: T, centers: &[T], sigma: T, probs: &mut [T]) -> T {
    soft_assign_into(z, centers, sigma, probs);
    centers.iter().zip(probs.iter()).map(|(&c, &p)| c * p).sum()
}

/// Center average weighted by the soft assignment.
pub fn soft_quantize<T: Scalar>(z: T, centers: &[T], sigma: T) -> T {
    let mut p = vec![T::zero(); centers.len()];
    soft_quantize_with(z, centers, sigma, &mut p)
}

/// Returns `d soft/dz` and writes `d soft/dc_k` into `dc`.
pub(crate) fn soft_quantize_grad_with<T: Scalar>(z: T, centers: &[T], sigma: T, probs: &mut [T], dc: &mut [T]) -> T {
    let soft = soft_quantize_with(z, centers, sigma, probs);
    let two_sigma = sigma + sigma;
    let mut dz = T::zero();
    for ((&c, &p), g) in centers.iter().zip(probs.iter()).zip(dc.iter_mut()) {
        let dev = p * (c - soft);
        // logit_k = -sigma (z - c_k)^2
        dz = dz - dev * two_sigma * (z - c);
        *g = p + dev * two_sigma * (z - c);
    }
    dz
}

/// Gradient of the soft quantization with respect to `z`, each center and `sigma`.
pub fn soft_quantize_grad<T: Scalar>(z: T, centers: &[T], sigma: T) -> (T, Vec<T>, T) {
    let mut probs = vec![T::zero(); centers.len()];
    let mut dc = vec![T::zero(); centers.len()];
    let dz = soft_quantize_grad_with(z, centers, sigma, &mut probs, &mut dc);
    let soft: T = centers.iter().zip(&probs).map(|(&c, &p)| c * p).sum();
    let dsigma = centers
        .iter()
        .zip(&probs)
        .map(|(&c, &p)| {
            let d = z - c;
            -p * (c - soft) * d * d
        })
        .sum();
    (dz, dc, dsigma)
}

/// Nearest center; exact ties go to the smallest index.
pub fn nearest_center<T: Scalar>(z: T, centers: &[T]) -> (usize, T) {
    let mut best = 0;
    let mut dist = (z - centers[0]).abs();
    for (j, &c) in centers.iter().enumerate().skip(1) {
        let d = (z - c).abs();
        if d < dist {
            best = j;
            dist = d;
        }
    }
    (best, centers[best])
}

pub fn hard_quantize<T: Scalar>(z: T, centers: &[T]) -> (usize, T) {
    nearest_center(z, centers)
}

/// Which of the two quantizers a description belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn tag(self) -> &'static str {
        match self {
            Side::A => "a",
            Side::B => "b",
        }
    }
}

/// One learnable center vector living in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CenterVector {
    pub param: ParamId,
    pub levels: usize,
}

impl CenterVector {
    pub fn name(side: Side) -> &'static str {
        match side {
            Side::A => "C_a",
            Side::B => "C_b",
        }
    }

    pub fn values<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> &'a [T] {
        store.get(self.param).tensor.data()
    }
}

/// Evenly spaced initial centers over `[-1, 1]`.
pub fn initial_centers<T: Scalar>(levels: usize) -> Tensor<T> {
    Tensor::from_fn(&[levels], |j| T::of(-1.0 + 2.0 * j as f64 / (levels - 1) as f64))
}

/// Quantizer-I and quantizer-II with a shared smoothness `sigma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerPair {
    pub qa: CenterVector,
    pub qb: CenterVector,
    pub sigma: f64,
}

impl QuantizerPair {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, levels: usize, sigma: f64) -> Result<Self> {
        if levels < 2 {
            return Err(Error::InvalidArgument(format!("quantizer needs at least 2 levels, got {levels}")));
        }
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        let a = store.register(CenterVector::name(Side::A), initial_centers(levels), ParamKind::Centers)?;
        let b = store.register(CenterVector::name(Side::B), initial_centers(levels), ParamKind::Centers)?;
        Ok(QuantizerPair { qa: CenterVector { param: a, levels }, qb: CenterVector { param: b, levels }, sigma })
    }

    pub fn side(&self, side: Side) -> CenterVector {
        match side {
            Side::A => self.qa,
            Side::B => self.qb,
        }
    }
}

/// Center indices of a quantized `[B,M,N,K]` tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolTensor {
    pub shape: Vec<usize>,
    pub indices: Vec<usize>,
    pub levels: usize,
}

impl SymbolTensor {
    pub fn new(shape: Vec<usize>, indices: Vec<usize>, levels: usize) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(Error::shape("symbols", format!("shape {shape:?} vs {} indices", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= levels) {
            return Err(Error::SymbolOutOfRange { index: bad, levels });
        }
        Ok(SymbolTensor { shape, indices, levels })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batch_item(&self, b: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        SymbolTensor { shape, indices: self.indices[b * per..(b + 1) * per].to_vec(), levels: self.levels }
    }

    /// Indices re-ordered from `[B,M,N,K]` layout to raster order `(b, k, m, n)`,
    /// matching the context model's depth layout.
    pub fn depth_order(&self) -> Vec<usize> {
        let (b, m, n, k) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let mut out = vec![0; self.indices.len()];
        for bi in 0..b {
            for mi in 0..m {
                for ni in 0..n {
                    for ki in 0..k {
                        out[((bi * k + ki) * m + mi) * n + ni] = self.indices[((bi * m + mi) * n + ni) * k + ki];
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`SymbolTensor::depth_order`].
    pub fn from_depth_order(shape: Vec<usize>, raster: &[usize], levels: usize) -> Result<Self> {
        let (b, m, n, k) = (shape[0], shape[1], shape[2], shape[3]);
        let mut idx = vec![0; raster.len()];
        for bi in 0..b {
            for mi in 0..m {
                for ni in 0..n {
                    for ki in 0..k {
                        idx[((bi * m + mi) * n + ni) * k + ki] = raster[((bi * k + ki) * m + mi) * n + ni];
                    }
                }
            }
        }
        SymbolTensor::new(shape, idx, levels)
    }
}

/// Adds a trailing one-hot axis of length `levels`.
pub fn to_one_hot<T: Scalar>(v: &SymbolTensor, levels: usize) -> Result<Tensor<T>> {
    let mut shape = v.shape.clone();
    shape.push(levels);
    let mut data = vec![T::zero(); v.len() * levels];
    for (i, &s) in v.indices.iter().enumerate() {
        if s >= levels {
            return Err(Error::SymbolOutOfRange { index: s, levels });
        }
        data[i * levels + s] = T::one();
    }
    Tensor::new(shape, data)
}

pub fn from_one_hot<T: Scalar>(t: &Tensor<T>) -> Result<SymbolTensor> {
    let levels = t.channels();
    let mut indices = Vec::with_capacity(t.len() / levels);
    for row in t.data().chunks(levels) {
        let mut hot = row.iter().enumerate().filter(|(_, &v)| v != T::zero());
        match (hot.next(), hot.next()) {
            (Some((j, &v)), None) if v == T::one() => indices.push(j),
            _ => return Err(Error::Corrupt("one-hot row without exactly one unit entry".into())),
        }
    }
    SymbolTensor::new(t.shape()[..t.rank() - 1].to_vec(), indices, levels)
}

/// Looks up each symbol's center value.
pub fn dequantize<T: Scalar>(v: &SymbolTensor, centers: &[T]) -> Result<Tensor<T>> {
    let data = v
        .indices
        .iter()
        .map(|&i| centers.get(i).copied().ok_or(Error::SymbolOutOfRange { index: i, levels: centers.len() }))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(v.shape.clone(), data)
}

/// Hard forward, soft backward quantization of a `[B,M,N,K]` node.
pub fn st_quantize<T: Scalar>(g: &mut Graph<T>, z: Var, centers: Var, sigma: T) -> Result<(Var, SymbolTensor)> {
    let levels = g.value(centers).len();
    let shape = g.shape(z).to_vec();
    let (v, idx) = g.straight_through(z, centers, sigma);
    Ok((v, SymbolTensor::new(shape, idx, levels)?))
}

/// Channel mask `clip(d*K - k, 0, 1)` for every importance value `d`.
pub fn expand_importance_values<T: Scalar>(d: &[T], k: usize) -> Vec<T> {
    let kk = T::of(k as f64);
    d.iter().flat_map(|&v| (0..k).map(move |ch| (v * kk - T::of(ch as f64)).max(T::zero()).min(T::one()))).collect()
}

pub fn apply_importance<T: Scalar>(g: &mut Graph<T>, z: Var, mask: Var) -> Result<Var> {
    if g.shape(z) != g.shape(mask) {
        return Err(Error::shape("apply_importance", format!("{:?} vs mask {:?}", g.shape(z), g.shape(mask))));
    }
    g.mul(z, mask)
}

/// How `sigma` evolves over training steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaSchedule {
    Fixed(f64),
    /// `start * factor^step`, capped at `max`.
    Geometric {
        start: f64,
        factor: f64,
        max: f64,
    },
}

impl SigmaSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            SigmaSchedule::Fixed(s) => s,
            SigmaSchedule::Geometric { start, factor, max } => (start * factor.powf(step as f64)).min(max),
        }
    }
}
