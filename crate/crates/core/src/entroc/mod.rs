//! Lossless bitstream layer: range coding of symbol tensors driven by the
//! context models, and the two-description container.

mod container;
mod range;

pub use container::{MdqContainer, FORMAT_VERSION, MAGIC};
pub use range::{code_length, quantize_probs, RangeDecoder, RangeEncoder, FLUSH_BYTES, FREQ_BITS, FREQ_TOTAL};

use crate::error::{Error, Result};
use crate::networks::{CodecModel, ContextState};
use crate::quant::{Side, SymbolTensor};
use crate::scalar::Scalar;

/// Sequential supplier of per-position frequency tables. Each table may only
/// depend on the symbols pushed before it.
pub trait ProbabilitySource {
    fn levels(&self) -> usize;
    /// Table for the next position, summing to [`FREQ_TOTAL`].
    fn next_freqs(&mut self, out: &mut [u32]) -> Result<()>;
    fn push(&mut self, symbol: usize) -> Result<()>;
}

/// The same table at every position.
#[derive(Clone, Debug)]
pub struct StaticSource {
    freqs: Vec<u32>,
}

impl StaticSource {
    pub fn new(freqs: Vec<u32>) -> Result<Self> {
        if freqs.len() < 2 || freqs.iter().sum::<u32>() != FREQ_TOTAL || freqs.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "static table must have >= 2 nonzero entries summing to {FREQ_TOTAL}"
            )));
        }
        Ok(StaticSource { freqs })
    }

    pub fn uniform(levels: usize) -> Result<Self> {
        let mut f = vec![0; levels];
        quantize_probs(&vec![1.0 / levels as f64; levels], &mut f)?;
        Self::new(f)
    }
}

impl ProbabilitySource for StaticSource {
    fn levels(&self) -> usize {
        self.freqs.len()
    }

    fn next_freqs(&mut self, out: &mut [u32]) -> Result<()> {
        out.copy_from_slice(&self.freqs);
        Ok(())
    }

    fn push(&mut self, _symbol: usize) -> Result<()> {
        Ok(())
    }
}

/// Context model of one description, evaluated position by position.
pub struct ContextSource<'a, T>(pub ContextState<'a, T>);

impl<T: Scalar> ProbabilitySource for ContextSource<'_, T> {
    fn levels(&self) -> usize {
        self.0.levels()
    }

    fn next_freqs(&mut self, out: &mut [u32]) -> Result<()> {
        quantize_probs(self.0.next_probs()?, out)
    }

    fn push(&mut self, symbol: usize) -> Result<()> {
        self.0.push(symbol)
    }
}

/// Range-codes `symbols` in order.
pub fn ac_encode(symbols: &[usize], src: &mut impl ProbabilitySource) -> Result<Vec<u8>> {
    let mut freqs = vec![0; src.levels()];
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        src.next_freqs(&mut freqs)?;
        enc.encode(&freqs, s)?;
        src.push(s)?;
    }
    Ok(enc.finish())
}

/// Decodes `count` symbols; the source sees only already decoded symbols.
pub fn ac_decode(payload: &[u8], src: &mut impl ProbabilitySource, count: usize) -> Result<Vec<usize>> {
    let mut freqs = vec![0; src.levels()];
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        src.next_freqs(&mut freqs)?;
        let s = dec.decode(&freqs)?;
        src.push(s)?;
        out.push(s);
    }
    if dec.consumed() != payload.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing payload bytes after {count} symbols",
            payload.len() - dec.consumed()
        )));
    }
    Ok(out)
}

/// Ideal code length in bits of `symbols` under the source's quantized tables.
pub fn ideal_bits(symbols: &[usize], src: &mut impl ProbabilitySource) -> Result<f64> {
    let mut freqs = vec![0; src.levels()];
    let mut bits = 0.0;
    for &s in symbols {
        src.next_freqs(&mut freqs)?;
        if s >= freqs.len() {
            return Err(Error::SymbolOutOfRange { index: s, levels: freqs.len() });
        }
        bits += code_length(&freqs, s);
        src.push(s)?;
    }
    Ok(bits)
}

/// CRC-32 of the symbols in coding order (one byte each) followed by the
/// payload. Covering the payload too means that even flips in the coder's
/// flush bytes, which may not change any symbol, are detected.
pub fn description_checksum(raster: &[usize], payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    let bytes: Vec<u8> = raster.iter().map(|&s| s as u8).collect();
    h.update(&bytes);
    h.update(payload);
    h.finalize()
}

/// One range-coded description.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedDescription {
    pub side: Side,
    pub model_hash: u64,
    pub checksum: u32,
    pub symbols: usize,
    pub payload: Vec<u8>,
}

impl CodedDescription {
    pub fn bits(&self) -> usize {
        self.payload.len() * 8
    }
}

/// Range-codes one `[1,M,N,K]` symbol tensor with the description's context model.
pub fn encode_description<T: Scalar>(
    model: &CodecModel<T>,
    side: Side,
    symbols: &SymbolTensor,
) -> Result<CodedDescription> {
    let s = &symbols.shape;
    if s.len() != 4 || s[0] != 1 || s[3] != model.cfg.latent_channels || symbols.levels != model.cfg.levels {
        return Err(Error::shape(
            "encode_description",
            format!(
                "symbols {s:?} over {} levels do not fit K={}, L={}",
                symbols.levels, model.cfg.latent_channels, model.cfg.levels
            ),
        ));
    }
    let raster = symbols.depth_order();
    let mut src = ContextSource(model.context(side, s[1], s[2])?);
    let payload = ac_encode(&raster, &mut src)?;
    Ok(CodedDescription {
        side,
        model_hash: model.model_hash(side),
        checksum: description_checksum(&raster, &payload),
        symbols: raster.len(),
        payload,
    })
}

/// Inverse of [`encode_description`] for an `M x N` feature grid. Refuses a
/// model whose hash differs from the one recorded at encode time.
pub fn decode_description<T: Scalar>(
    model: &CodecModel<T>,
    coded: &CodedDescription,
    (m, n): (usize, usize),
) -> Result<SymbolTensor> {
    let hash = model.model_hash(coded.side);
    if hash != coded.model_hash {
        return Err(Error::ModelHashMismatch { stream: coded.model_hash, model: hash });
    }
    let k = model.cfg.latent_channels;
    if coded.symbols != m * n * k {
        return Err(Error::Corrupt(format!("{} symbols recorded for a {m}x{n}x{k} grid", coded.symbols)));
    }
    let mut src = ContextSource(model.context(coded.side, m, n)?);
    let raster = ac_decode(&coded.payload, &mut src, coded.symbols)?;
    if description_checksum(&raster, &coded.payload) != coded.checksum {
        return Err(Error::Corrupt(format!("{} description checksum mismatch", coded.side.tag())));
    }
    SymbolTensor::from_depth_order(vec![1, m, n, k], &raster, model.cfg.levels)
}

/// Codes both descriptions of one `[1,M,N,K]` symbol pair into a container.
pub fn encode_container<T: Scalar>(model: &CodecModel<T>, a: &SymbolTensor, b: &SymbolTensor) -> Result<MdqContainer> {
    let (m, n) = (a.shape[1], a.shape[2]);
    if a.shape != b.shape {
        return Err(Error::shape("encode_container", format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let d = crate::networks::DOWNSAMPLE;
    let dim = |v: usize| u16::try_from(v).map_err(|_| Error::InvalidArgument(format!("dimension {v} too large")));
    let c = MdqContainer {
        width: dim(n * d)?,
        height: dim(m * d)?,
        m: dim(m)?,
        n: dim(n)?,
        k: model.cfg.latent_channels as u8,
        l: model.cfg.levels as u8,
        a: Some(encode_description(model, Side::A, a)?),
        b: Some(encode_description(model, Side::B, b)?),
    };
    c.validate()?;
    Ok(c)
}

/// Decodes one description of a container, or `None` if it was not received.
/// The header's `K` and `L` must match the model.
pub fn decode_container<T: Scalar>(
    model: &CodecModel<T>,
    c: &MdqContainer,
    side: Side,
) -> Result<Option<SymbolTensor>> {
    if usize::from(c.k) != model.cfg.latent_channels || usize::from(c.l) != model.cfg.levels {
        return Err(Error::Corrupt(format!(
            "stream has K={}, L={} but the model has K={}, L={}",
            c.k, c.l, model.cfg.latent_channels, model.cfg.levels
        )));
    }
    c.description(side).map(|d| decode_description(model, d, (usize::from(c.m), usize::from(c.n)))).transpose()
}
