//! Encoder, side/central decoders and the two context models, assembled into
//! a [`CodecModel`].

mod decoder;
mod encoder;
mod entropy;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use decoder::{Decoder, DecoderBack, DECONV_KERNEL};
pub use encoder::{Encoder, EncoderOutput};
pub use entropy::{rate_estimate, ContextState, EntropyModel, PROB_FLOOR};

use crate::diff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::losses::SsimPreset;
use crate::quant::{self, QuantizerPair, Side, SymbolTensor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial downsampling factor between the image and the feature tensor.
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub base_channels: usize,
    /// Number of feature maps `K` in the quantized tensor.
    pub latent_channels: usize,
    /// Centers per quantizer `L`.
    pub levels: usize,
    pub resconv_repeats: usize,
    pub share_decoders: bool,
    pub use_importance: bool,
    pub ssim_preset: SsimPreset,
    /// Hidden width of the context models.
    pub entropy_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 32,
            latent_channels: 8,
            levels: 8,
            resconv_repeats: 2,
            share_decoders: false,
            use_importance: true,
            ssim_preset: SsimPreset::Mr,
            entropy_channels: 16,
        }
    }
}

impl NetConfig {
    /// Full-width variant.
    pub fn full_scale() -> Self {
        NetConfig { base_channels: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 {
            return Err(Error::Config(format!("base_channels must be >= 8, got {}", self.base_channels)));
        }
        if self.latent_channels < 1 {
            return Err(Error::Config("K (latent_channels) must be >= 1".into()));
        }
        if self.levels < 2 {
            return Err(Error::Config(format!("L (levels) must be >= 2, got {}", self.levels)));
        }
        if self.levels > 255 || self.latent_channels > 255 {
            return Err(Error::Config("K and L must fit in one byte".into()));
        }
        if self.resconv_repeats < 1 {
            return Err(Error::Config("resconv_repeats must be >= 1".into()));
        }
        if self.entropy_channels < 1 {
            return Err(Error::Config("entropy_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Feature-tensor size `(M, N)` for an `h x w` image.
    pub fn latent_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h == 0 || w == 0 || !h.is_multiple_of(DOWNSAMPLE) || !w.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::InvalidArgument(format!(
                "image is {h}x{w}; both sides must be nonzero multiples of {DOWNSAMPLE}"
            )));
        }
        Ok((h / DOWNSAMPLE, w / DOWNSAMPLE))
    }
}

/// How the feature tensor is quantized in a training forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Hard values forward, soft gradients backward.
    StraightThrough,
    /// Soft values both ways; used for gradient verification of the whole
    /// pipeline, where the hard forward is piecewise constant.
    Soft,
}

/// Nodes of one training forward pass.
pub struct Forward {
    pub z: Var,
    pub importance: Option<(Var, Var)>,
    /// Feature tensors after importance masking.
    pub masked: (Var, Var),
    /// Quantized values fed to the decoders and context models.
    pub quantized: (Var, Var),
    pub symbols: (SymbolTensor, SymbolTensor),
    pub side_a: Var,
    pub side_b: Var,
    pub central: Var,
    pub probs: (Var, Var),
    /// Estimated bits per symbol for each description.
    pub rates: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct CodecModel<T> {
    pub cfg: NetConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder_a: Decoder,
    pub decoder_b: Decoder,
    pub decoder_central: Decoder,
    pub entropy_a: EntropyModel,
    pub entropy_b: EntropyModel,
    pub quant: QuantizerPair,
}

/// Trainable parameter counts per component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Census {
    pub rows: Vec<(String, usize)>,
    pub total: usize,
}

impl Census {
    pub fn get(&self, component: &str) -> usize {
        self.rows.iter().find(|(c, _)| c == component).map_or(0, |r| r.1)
    }
}

impl<T: Scalar> CodecModel<T> {
    /// Builds a freshly initialised model; the same seed gives the same weights.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = cfg.latent_channels;
        let encoder = Encoder::register(&mut store, &cfg, &mut rng)?;
        let (decoder_a, decoder_b, decoder_central) = if cfg.share_decoders {
            let back = DecoderBack::register(&mut store, "dec_shared", &cfg, &mut rng)?;
            (
                Decoder::register_front(&mut store, "dec_a", k, &cfg, back.clone(), &mut rng)?,
                Decoder::register_front(&mut store, "dec_b", k, &cfg, back.clone(), &mut rng)?,
                Decoder::register_front(&mut store, "dec_c", 2 * k, &cfg, back, &mut rng)?,
            )
        } else {
            let mut private = |name: &str, cin| -> Result<Decoder> {
                let back = DecoderBack::register(&mut store, name, &cfg, &mut rng)?;
                Decoder::register_front(&mut store, name, cin, &cfg, back, &mut rng)
            };
            (private("dec_a", k)?, private("dec_b", k)?, private("dec_c", 2 * k)?)
        };
        let entropy_a = EntropyModel::register(&mut store, "ent_a", cfg.entropy_channels, cfg.levels, &mut rng)?;
        let entropy_b = EntropyModel::register(&mut store, "ent_b", cfg.entropy_channels, cfg.levels, &mut rng)?;
        let quant = QuantizerPair::register(&mut store, cfg.levels, 1.0)?;
        Ok(CodecModel { cfg, store, encoder, decoder_a, decoder_b, decoder_central, entropy_a, entropy_b, quant })
    }

    pub fn decoder(&self, side: Side) -> &Decoder {
        match side {
            Side::A => &self.decoder_a,
            Side::B => &self.decoder_b,
        }
    }

    pub fn entropy(&self, side: Side) -> &EntropyModel {
        match side {
            Side::A => &self.entropy_a,
            Side::B => &self.entropy_b,
        }
    }

    pub fn centers(&self, side: Side) -> &[T] {
        self.quant.side(side).values(&self.store)
    }

    /// Feature tensor and importance maps of a `[B,H,W,3]` batch.
    pub fn encode(&self, g: &mut Graph<T>, x: Var) -> Result<EncoderOutput> {
        self.encoder.forward(g, &self.store, x)
    }

    /// Applies the importance masks; without importance maps both
    /// descriptions see the raw feature tensor.
    pub fn mask_features(&self, g: &mut Graph<T>, enc: &EncoderOutput) -> Result<(Var, Var)> {
        match enc.importance {
            Some((da, db)) => {
                let k = self.cfg.latent_channels;
                let ma = g.expand_importance(da, k)?;
                let mb = g.expand_importance(db, k)?;
                Ok((g.mul(enc.z, ma)?, g.mul(enc.z, mb)?))
            }
            None => Ok((enc.z, enc.z)),
        }
    }

    pub fn side_decode(&self, g: &mut Graph<T>, q: Var, side: Side) -> Result<Var> {
        self.decoder(side).forward(g, &self.store, q)
    }

    pub fn central_decode(&self, g: &mut Graph<T>, qa: Var, qb: Var) -> Result<Var> {
        if g.shape(qa) != g.shape(qb) {
            return Err(Error::shape("central_decode", format!("{:?} vs {:?}", g.shape(qa), g.shape(qb))));
        }
        let q = g.concat(&[qa, qb])?;
        self.decoder_central.forward(g, &self.store, q)
    }

    /// `[B,M,N,K]` values to `[B,K,M,N,L]` probabilities.
    pub fn entropy_forward(&self, g: &mut Graph<T>, v: Var, side: Side) -> Result<Var> {
        self.entropy(side).forward(g, &self.store, v)
    }

    fn quantize(&self, g: &mut Graph<T>, z: Var, side: Side, sigma: T, mode: QuantMode) -> Result<(Var, SymbolTensor)> {
        let c = g.param(&self.store, self.quant.side(side).param);
        match mode {
            QuantMode::StraightThrough => quant::st_quantize(g, z, c, sigma),
            QuantMode::Soft => {
                let centers = self.centers(side);
                let idx = g.value(z).data().iter().map(|&v| quant::nearest_center(v, centers).0).collect();
                let symbols = SymbolTensor::new(g.shape(z).to_vec(), idx, centers.len())?;
                Ok((g.soft_quantize(z, c, sigma), symbols))
            }
        }
    }

    /// Whole training forward pass for a `[B,H,W,3]` batch.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, sigma: T, mode: QuantMode) -> Result<Forward> {
        let enc = self.encode(g, x)?;
        let (za, zb) = self.mask_features(g, &enc)?;
        let (qa, sa) = self.quantize(g, za, Side::A, sigma, mode)?;
        let (qb, sb) = self.quantize(g, zb, Side::B, sigma, mode)?;
        let side_a = self.side_decode(g, qa, Side::A)?;
        let side_b = self.side_decode(g, qb, Side::B)?;
        let central = self.central_decode(g, qa, qb)?;
        let pa = self.entropy_forward(g, qa, Side::A)?;
        let pb = self.entropy_forward(g, qb, Side::B)?;
        let ra = rate_estimate(g, pa, &sa)?;
        let rb = rate_estimate(g, pb, &sb)?;
        Ok(Forward {
            z: enc.z,
            importance: enc.importance,
            masked: (za, zb),
            quantized: (qa, qb),
            symbols: (sa, sb),
            side_a,
            side_b,
            central,
            probs: (pa, pb),
            rates: (ra, rb),
        })
    }

    /// Symbols of both descriptions for a `[B,H,W,3]` batch.
    pub fn analyze(&self, x: &Tensor<T>) -> Result<(SymbolTensor, SymbolTensor)> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let enc = self.encode(&mut g, xv)?;
        let (za, zb) = self.mask_features(&mut g, &enc)?;
        let sym = |side: Side, z: Var| -> Result<SymbolTensor> {
            let centers = self.centers(side);
            let idx = g.value(z).data().iter().map(|&v| quant::hard_quantize(v, centers).0).collect();
            SymbolTensor::new(g.shape(z).to_vec(), idx, centers.len())
        };
        Ok((sym(Side::A, za)?, sym(Side::B, zb)?))
    }

    /// Reconstruction from whichever descriptions arrived: the central decoder
    /// when both are present, otherwise the matching side decoder.
    pub fn reconstruct(&self, a: Option<&SymbolTensor>, b: Option<&SymbolTensor>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let y = match (a, b) {
            (Some(a), Some(b)) => {
                let qa = g.input(quant::dequantize(a, self.centers(Side::A))?);
                let qb = g.input(quant::dequantize(b, self.centers(Side::B))?);
                self.central_decode(&mut g, qa, qb)?
            }
            (Some(a), None) => {
                let q = g.input(quant::dequantize(a, self.centers(Side::A))?);
                self.side_decode(&mut g, q, Side::A)?
            }
            (None, Some(b)) => {
                let q = g.input(quant::dequantize(b, self.centers(Side::B))?);
                self.side_decode(&mut g, q, Side::B)?
            }
            (None, None) => return Err(Error::InvalidArgument("no description to decode".into())),
        };
        Ok(g.value(y).clone())
    }

    /// Sequential context-model evaluator for one `K x M x N` item.
    pub fn context(&self, side: Side, m: usize, n: usize) -> Result<ContextState<'_, T>> {
        self.entropy(side).context(&self.store, self.centers(side), (self.cfg.latent_channels, m, n))
    }

    /// Fingerprint of everything the decoder of one description must agree
    /// on: the context model weights, the centers and the tensor layout.
    pub fn model_hash(&self, side: Side) -> u64 {
        let mut h = Sha256::new();
        h.update([T::DTYPE, self.cfg.latent_channels as u8, self.cfg.levels as u8, side.tag().as_bytes()[0]]);
        let ent = self.entropy(side);
        for layer in &ent.layers {
            for id in [layer.weight, layer.bias] {
                let mut buf = Vec::new();
                for &v in self.store.get(id).tensor.data() {
                    v.write_le(&mut buf);
                }
                h.update(&buf);
            }
        }
        let mut buf = Vec::new();
        for &v in self.centers(side) {
            v.write_le(&mut buf);
        }
        h.update(&buf);
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
    }

    /// Trainable parameter counts by component, each parameter counted once.
    pub fn param_census(&self) -> Census {
        let mut rows: Vec<(String, usize)> = Vec::new();
        let mut total = 0;
        for (_, p) in self.store.trainable() {
            let comp = match p.id.split('.').next().unwrap_or("") {
                "enc" => "encoder",
                "dec_a" => "decoder_a",
                "dec_b" => "decoder_b",
                "dec_c" => "decoder_central",
                "dec_shared" => "decoder_shared",
                "ent_a" => "entropy_a",
                "ent_b" => "entropy_b",
                _ => "quantizers",
            };
            let n = p.tensor.len();
            total += n;
            match rows.iter_mut().find(|(c, _)| c == comp) {
                Some(r) => r.1 += n,
                None => rows.push((comp.to_string(), n)),
            }
        }
        Census { rows, total }
    }
}
