//! Causal 3D context model predicting a distribution over centers for each
//! quantized symbol, given all symbols earlier in raster order (k, m, n).

use rand::Rng;

use super::layers::{lrelu, MaskedConv3d, LEAKY_SLOPE};
use crate::diff::kernels::{causal_taps, conv3d_at, softmax_row, Conv3dGeom, Tap};
use crate::diff::{Graph, MaskType, ParamStore, Var};
use crate::error::{Error, Result};
use crate::quant::SymbolTensor;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability floor inside the log of the rate estimate.
pub const PROB_FLOOR: f64 = 1e-9;

/// Six masked 3D convolutions: a type-A input layer, two residual blocks of
/// two type-B layers, and a type-B layer producing `L` logits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntropyModel {
    pub layers: [MaskedConv3d; 6],
    pub channels: usize,
    pub levels: usize,
}

impl EntropyModel {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        levels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let e = channels;
        let mut mk =
            |i: usize, cin, cout, mask| MaskedConv3d::register(store, &format!("{name}.l{i}"), cin, cout, mask, rng);
        let layers = [
            mk(0, 1, e, MaskType::A)?,
            mk(1, e, e, MaskType::B)?,
            mk(2, e, e, MaskType::B)?,
            mk(3, e, e, MaskType::B)?,
            mk(4, e, e, MaskType::B)?,
            mk(5, e, levels, MaskType::B)?,
        ];
        Ok(EntropyModel { layers, channels, levels })
    }

    /// `[B,M,N,K]` values to `[B,K,M,N,L]` probabilities.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, v: Var) -> Result<Var> {
        let x = g.to_depth(v)?;
        let l = &self.layers;
        let a0 = l[0].forward(g, store, x)?;
        let h0 = lrelu(g, a0);
        let a1 = l[1].forward(g, store, h0)?;
        let u1 = lrelu(g, a1);
        let a2 = l[2].forward(g, store, u1)?;
        let r1 = g.add(h0, a2)?;
        let a3 = l[3].forward(g, store, r1)?;
        let u2 = lrelu(g, a3);
        let a4 = l[4].forward(g, store, u2)?;
        let r2 = g.add(r1, a4)?;
        let logits = l[5].forward(g, store, r2)?;
        Ok(g.softmax(logits))
    }

    /// Sequential evaluator for one `K x M x N` item, used by the arithmetic
    /// coder on both sides of the channel.
    pub fn context<'a, T: Scalar>(
        &self,
        store: &'a ParamStore<T>,
        centers: &[T],
        (k, m, n): (usize, usize, usize),
    ) -> Result<ContextState<'a, T>> {
        ContextState::new(self, store, centers, (k, m, n))
    }
}

/// Bits per symbol: mean of `-log2 max(p, 1e-9)` over the probabilities of
/// the actual symbols. `probs` is `[B,K,M,N,L]`, `symbols` is `[B,M,N,K]`.
pub fn rate_estimate<T: Scalar>(g: &mut Graph<T>, probs: Var, symbols: &SymbolTensor) -> Result<Var> {
    let s = g.shape(probs);
    let want = [symbols.shape[0], symbols.shape[3], symbols.shape[1], symbols.shape[2], symbols.levels];
    if s != want {
        return Err(Error::shape(
            "rate_estimate",
            format!("probabilities {s:?} do not match symbols {:?}", symbols.shape),
        ));
    }
    let p = g.gather(probs, symbols.depth_order())?;
    let lp = g.ln_floor(p, T::of(PROB_FLOOR));
    let m = g.mean(lp);
    Ok(g.scale(m, T::of(-std::f64::consts::LOG2_E)))
}

/// Incremental state of the context model for one item. Each position is
/// computed with the same per-site routine as the batched forward, so the
/// probabilities match it bit for bit.
pub struct ContextState<'a, T> {
    weights: [&'a [T]; 6],
    biases: [&'a [T]; 6],
    taps_a: Vec<Tap>,
    taps_b: Vec<Tap>,
    geom_in: Conv3dGeom,
    geom_hidden: Conv3dGeom,
    geom_out: Conv3dGeom,
    centers: Vec<T>,
    x: Vec<T>,
    h0: Vec<T>,
    u1: Vec<T>,
    r1: Vec<T>,
    u2: Vec<T>,
    r2: Vec<T>,
    scratch: Vec<T>,
    logits: Vec<T>,
    probs: Vec<T>,
    dims: (usize, usize, usize),
    pos: usize,
}

impl<'a, T: Scalar> ContextState<'a, T> {
    fn new(
        model: &EntropyModel,
        store: &'a ParamStore<T>,
        centers: &[T],
        (k, m, n): (usize, usize, usize),
    ) -> Result<Self> {
        if centers.len() != model.levels {
            return Err(Error::shape(
                "context",
                format!("{} centers for a model over {} levels", centers.len(), model.levels),
            ));
        }
        let e = model.channels;
        let l = model.levels;
        let weights = model.layers.map(|c| store.get(c.weight).tensor.data());
        let biases = model.layers.map(|c| store.get(c.bias).tensor.data());
        let x_ = MaskedConv3d::EXTENT;
        let sites = k * m * n;
        Ok(ContextState {
            weights,
            biases,
            taps_a: causal_taps(x_, x_, x_, MaskType::A)?,
            taps_b: causal_taps(x_, x_, x_, MaskType::B)?,
            geom_in: Conv3dGeom::new(&[1, k, m, n, 1], &[x_, x_, x_, 1, e])?,
            geom_hidden: Conv3dGeom::new(&[1, k, m, n, e], &[x_, x_, x_, e, e])?,
            geom_out: Conv3dGeom::new(&[1, k, m, n, e], &[x_, x_, x_, e, l])?,
            centers: centers.to_vec(),
            x: vec![T::zero(); sites],
            h0: vec![T::zero(); sites * e],
            u1: vec![T::zero(); sites * e],
            r1: vec![T::zero(); sites * e],
            u2: vec![T::zero(); sites * e],
            r2: vec![T::zero(); sites * e],
            scratch: vec![T::zero(); e],
            logits: vec![T::zero(); l],
            probs: vec![T::zero(); l],
            dims: (k, m, n),
            pos: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn levels(&self) -> usize {
        self.centers.len()
    }

    /// Distribution of the symbol at the current position. Call once per
    /// position, before [`ContextState::push`].
    pub fn next_probs(&mut self) -> Result<&[T]> {
        if self.pos >= self.len() {
            return Err(Error::InvalidArgument("context model has no positions left".into()));
        }
        let (_, m, n) = self.dims;
        let p = self.pos;
        let site = (0, p / (m * n), (p / n) % m, p % n);
        let slope = T::of(LEAKY_SLOPE);
        let e = self.scratch.len();
        let span = p * e..(p + 1) * e;
        let leaky = |v: T| if v > T::zero() { v } else { v * slope };

        conv3d_at(&self.x, self.weights[0], &self.taps_a, &self.geom_in, site, &mut self.scratch);
        for ((o, &a), &b) in self.h0[span.clone()].iter_mut().zip(&self.scratch).zip(self.biases[0]) {
            *o = leaky(a + b);
        }
        conv3d_at(&self.h0, self.weights[1], &self.taps_b, &self.geom_hidden, site, &mut self.scratch);
        for ((o, &a), &b) in self.u1[span.clone()].iter_mut().zip(&self.scratch).zip(self.biases[1]) {
            *o = leaky(a + b);
        }
        conv3d_at(&self.u1, self.weights[2], &self.taps_b, &self.geom_hidden, site, &mut self.scratch);
        for (i, (&a, &b)) in self.scratch.iter().zip(self.biases[2]).enumerate() {
            self.r1[p * e + i] = self.h0[p * e + i] + (a + b);
        }
        conv3d_at(&self.r1, self.weights[3], &self.taps_b, &self.geom_hidden, site, &mut self.scratch);
        for ((o, &a), &b) in self.u2[span.clone()].iter_mut().zip(&self.scratch).zip(self.biases[3]) {
            *o = leaky(a + b);
        }
        conv3d_at(&self.u2, self.weights[4], &self.taps_b, &self.geom_hidden, site, &mut self.scratch);
        for (i, (&a, &b)) in self.scratch.iter().zip(self.biases[4]).enumerate() {
            self.r2[p * e + i] = self.r1[p * e + i] + (a + b);
        }
        conv3d_at(&self.r2, self.weights[5], &self.taps_b, &self.geom_out, site, &mut self.logits);
        for (o, &b) in self.logits.iter_mut().zip(self.biases[5]) {
            *o = *o + b;
        }
        softmax_row(&self.logits, &mut self.probs);
        Ok(&self.probs)
    }

    /// Records the symbol decoded or encoded at the current position.
    pub fn push(&mut self, symbol: usize) -> Result<()> {
        let c =
            *self.centers.get(symbol).ok_or(Error::SymbolOutOfRange { index: symbol, levels: self.centers.len() })?;
        self.x[self.pos] = c;
        self.pos += 1;
        Ok(())
    }

    /// Runs every position for a known symbol sequence and returns the
    /// `[K*M*N, L]` probability table.
    pub fn probabilities_for(mut self, raster: &[usize]) -> Result<Tensor<T>> {
        let l = self.levels();
        let mut out = Vec::with_capacity(raster.len() * l);
        for &s in raster {
            out.extend_from_slice(self.next_probs()?);
            self.push(s)?;
        }
        Tensor::new(vec![raster.len(), l], out)
    }
}
