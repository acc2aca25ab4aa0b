//! Side and central decoders, optionally sharing their back layers.

use rand::Rng;

use super::layers::{lrelu, Deconv, DilatedBlock, ResBlock};
use super::NetConfig;
use crate::diff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DECONV_KERNEL: usize = 5;

/// Layers after the first upsampling. Under decoder sharing one instance is
/// used by all three decoders, so its parameter ids coincide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderBack {
    pub res1: ResBlock,
    pub up2: Deconv,
    pub res2: ResBlock,
    pub up3: Deconv,
}

impl DecoderBack {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &NetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.base_channels;
        Ok(DecoderBack {
            res1: ResBlock::register(store, &format!("{name}.res1"), c, cfg.resconv_repeats, rng)?,
            up2: Deconv::register(store, &format!("{name}.up2"), c, c, DECONV_KERNEL, 2, rng)?,
            res2: ResBlock::register(store, &format!("{name}.res2"), c, cfg.resconv_repeats, rng)?,
            up3: Deconv::register(store, &format!("{name}.up3"), c, 3, DECONV_KERNEL, 2, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.res1.forward(g, store, x)?;
        let h = self.up2.forward(g, store, h)?;
        let h = lrelu(g, h);
        let h = self.res2.forward(g, store, h)?;
        let y = self.up3.forward(g, store, h)?;
        Ok(g.sigmoid(y))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoder {
    pub in_channels: usize,
    pub up1: Deconv,
    /// Private dilated block placed before the shared layers.
    pub pre_share: Option<DilatedBlock>,
    pub back: DecoderBack,
}

impl Decoder {
    pub fn register_front<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        cfg: &NetConfig,
        back: DecoderBack,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.base_channels;
        let up1 = Deconv::register(store, &format!("{name}.up1"), in_channels, c, DECONV_KERNEL, 2, rng)?;
        let pre_share = if cfg.share_decoders {
            Some(DilatedBlock::register(store, &format!("{name}.pre"), c, rng)?)
        } else {
            None
        };
        Ok(Decoder { in_channels, up1, pre_share, back })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, q: Var) -> Result<Var> {
        let s = g.shape(q);
        if s.len() != 4 || s[3] != self.in_channels {
            return Err(Error::shape("decode", format!("expected [B,M,N,{}] input, got {s:?}", self.in_channels)));
        }
        let h = self.up1.forward(g, store, q)?;
        let mut h = lrelu(g, h);
        if let Some(pre) = &self.pre_share {
            h = pre.forward(g, store, h)?;
        }
        self.back.forward(g, store, h)
    }
}
