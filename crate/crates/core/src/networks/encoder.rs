//! Multi-scale dilated encoder producing the feature tensor and the two
//! importance maps from a shared trunk.

use rand::Rng;

use super::layers::{lrelu, Conv, DilatedBlock};
use super::NetConfig;
use crate::diff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    head: Conv,
    blocks: [DilatedBlock; 3],
    /// 5x5 stride-2 convolutions after each dilated block.
    down: [Conv; 3],
    /// Stride-4 conv taking the first downsampled level to `/8`.
    branch1: Conv,
    /// Stride-2 conv taking the second downsampled level to `/8`.
    branch2: Conv,
    aggregate: Conv,
    z_head: Conv,
    importance: Option<[Conv; 2]>,
}

pub struct EncoderOutput {
    /// `[B,M,N,K]` feature tensor.
    pub z: Var,
    /// `[B,M,N,1]` importance maps in `[0,1]`; absent when importance maps
    /// are disabled.
    pub importance: Option<(Var, Var)>,
}

impl Encoder {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.base_channels;
        let head = Conv::register(store, "enc.head", 3, c, 3, 1, 1, rng)?;
        let blocks = [
            DilatedBlock::register(store, "enc.dil1", c, rng)?,
            DilatedBlock::register(store, "enc.dil2", c, rng)?,
            DilatedBlock::register(store, "enc.dil3", c, rng)?,
        ];
        let down = [
            Conv::register(store, "enc.down1", c, c, 5, 2, 1, rng)?,
            Conv::register(store, "enc.down2", c, c, 5, 2, 1, rng)?,
            Conv::register(store, "enc.down3", c, c, 5, 2, 1, rng)?,
        ];
        let branch1 = Conv::register(store, "enc.branch1", c, c, 5, 4, 1, rng)?;
        let branch2 = Conv::register(store, "enc.branch2", c, c, 5, 2, 1, rng)?;
        let aggregate = Conv::register(store, "enc.aggregate", 3 * c, c, 3, 1, 1, rng)?;
        let z_head = Conv::register(store, "enc.z", c, cfg.latent_channels, 3, 1, 1, rng)?;
        let importance = if cfg.use_importance {
            Some([
                Conv::register(store, "enc.imp_a", c, 1, 3, 1, 1, rng)?,
                Conv::register(store, "enc.imp_b", c, 1, 3, 1, 1, rng)?,
            ])
        } else {
            None
        };
        Ok(Encoder { head, blocks, down, branch1, branch2, aggregate, z_head, importance })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<EncoderOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape("encode", format!("expected [B,H,W,3] image, got {s:?}")));
        }
        if !s[1].is_multiple_of(8) || !s[2].is_multiple_of(8) || s[1] == 0 || s[2] == 0 {
            return Err(Error::InvalidArgument(format!(
                "image is {}x{}; both sides must be nonzero multiples of 8",
                s[1], s[2]
            )));
        }
        let h = self.head.forward(g, store, x)?;
        let h = lrelu(g, h);

        let d1 = self.blocks[0].forward(g, store, h)?;
        let p1 = self.down[0].forward(g, store, d1)?;
        let p1 = lrelu(g, p1);
        let b1 = self.branch1.forward(g, store, p1)?;
        let b1 = lrelu(g, b1);

        let d2 = self.blocks[1].forward(g, store, p1)?;
        let p2 = self.down[1].forward(g, store, d2)?;
        let p2 = lrelu(g, p2);
        let b2 = self.branch2.forward(g, store, p2)?;
        let b2 = lrelu(g, b2);

        let d3 = self.blocks[2].forward(g, store, p2)?;
        let p3 = self.down[2].forward(g, store, d3)?;
        let p3 = lrelu(g, p3);

        let cat = g.concat(&[b1, b2, p3])?;
        let trunk = self.aggregate.forward(g, store, cat)?;
        let trunk = lrelu(g, trunk);

        let z = self.z_head.forward(g, store, trunk)?;
        let importance = match &self.importance {
            Some([a, b]) => {
                let da = a.forward(g, store, trunk)?;
                let db = b.forward(g, store, trunk)?;
                Some((g.sigmoid(da), g.sigmoid(db)))
            }
            None => None,
        };
        Ok(EncoderOutput { z, importance })
    }
}
