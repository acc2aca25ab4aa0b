use rand::Rng;

use crate::diff::kernels::causal_taps;
use crate::diff::{Graph, MaskType, Padding, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Variance-preserving kernel gain in front of a leaky ReLU.
pub fn leaky_gain() -> f64 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

pub(crate) fn lrelu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, T::of(LEAKY_SLOPE))
}

/// Same-padded 2D convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::register_with_gain(store, name, cin, cout, k, stride, dilation, leaky_gain(), rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn register_with_gain<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register_kernel(format!("{name}.w"), &[k, k, cin, cout], (k * k * cin) as f64, gain, rng)?;
        let bias = store.register_bias(format!("{name}.b"), cout)?;
        Ok(Conv { weight, bias, stride, dilation })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, self.stride, self.dilation, Padding::Same)?;
        g.add_bias(y, b)
    }
}

/// Transposed convolution upsampling by `stride`, with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Deconv {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // kernel is stored in the layout of the convolution it is the adjoint of;
        // each output sees about k*k/stride^2 taps per input channel
        let fan_in = (k * k * cin) as f64 / (stride * stride) as f64;
        let weight = store.register_kernel(format!("{name}.w"), &[k, k, cout, cin], fan_in, leaky_gain(), rng)?;
        let bias = store.register_bias(format!("{name}.b"), cout)?;
        Ok(Deconv { weight, bias, stride })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv_transpose2d(x, w, self.stride)?;
        g.add_bias(y, b)
    }
}

/// 3x3x3 causally masked 3D convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskedConv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub mask: MaskType,
}

impl MaskedConv3d {
    pub const EXTENT: usize = 3;

    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        mask: MaskType,
        rng: &mut R,
    ) -> Result<Self> {
        let k = Self::EXTENT;
        let taps = causal_taps(k, k, k, mask)?.len();
        let weight = store.register_kernel(
            format!("{name}.w"),
            &[k, k, k, cin, cout],
            (taps * cin) as f64,
            leaky_gain(),
            rng,
        )?;
        let bias = store.register_bias(format!("{name}.b"), cout)?;
        Ok(MaskedConv3d { weight, bias, mask })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv3d_masked(x, w, self.mask)?;
        g.add_bias(y, b)
    }
}

/// Three 3x3 conv + leaky-ReLU units wrapped by one skip connection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResConvTriple {
    pub convs: [Conv; 3],
}

impl ResConvTriple {
    /// `branch_gain` scales the initial kernel of the last conv, so that a
    /// cascade of skip connections does not blow up the activations.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        ch: usize,
        branch_gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mk =
            |i: usize, g: f64| Conv::register_with_gain(store, &format!("{name}.{i}"), ch, ch, 3, 1, 1, g, rng);
        let g = leaky_gain();
        Ok(ResConvTriple { convs: [mk(0, g)?, mk(1, g)?, mk(2, g * branch_gain)?] })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(g, store, h)?;
            h = lrelu(g, y);
        }
        g.add(x, h)
    }
}

/// `repeats` cascaded [`ResConvTriple`]s.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResBlock {
    pub units: Vec<ResConvTriple>,
}

impl ResBlock {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        ch: usize,
        repeats: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let branch_gain = 1.0 / (repeats as f64).sqrt();
        let units = (0..repeats)
            .map(|i| ResConvTriple::register(store, &format!("{name}.{i}"), ch, branch_gain, rng))
            .collect::<Result<_>>()?;
        Ok(ResBlock { units })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.units.iter().try_fold(x, |h, u| u.forward(g, store, h))
    }
}

/// Three cascaded 3x3 dilated convolutions (dilations 1, 2, 4), each followed
/// by a leaky ReLU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DilatedBlock {
    pub convs: [Conv; 3],
}

impl DilatedBlock {
    pub const DILATIONS: [usize; 3] = [1, 2, 4];

    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut R) -> Result<Self> {
        let mut mk = |i: usize| Conv::register(store, &format!("{name}.{i}"), ch, ch, 3, 1, Self::DILATIONS[i], rng);
        Ok(DilatedBlock { convs: [mk(0)?, mk(1)?, mk(2)?] })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            let y = c.forward(g, store, h)?;
            h = lrelu(g, y);
        }
        Ok(h)
    }
}
