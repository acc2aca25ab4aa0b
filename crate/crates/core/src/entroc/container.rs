//! `MDQ1` container holding one or two coded descriptions of an image.

use super::CodedDescription;
use crate::bytes::Reader;
use crate::error::{Error, Result};
use crate::networks::DOWNSAMPLE;
use crate::quant::Side;

pub const MAGIC: [u8; 4] = *b"MDQ1";
pub const FORMAT_VERSION: u8 = 1;

const FLAG_A: u8 = 1;
const FLAG_B: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MdqContainer {
    pub width: u16,
    pub height: u16,
    /// Feature-grid rows, `height / 8`.
    pub m: u16,
    /// Feature-grid columns, `width / 8`.
    pub n: u16,
    pub k: u8,
    pub l: u8,
    pub a: Option<CodedDescription>,
    pub b: Option<CodedDescription>,
}

impl MdqContainer {
    pub fn validate(&self) -> Result<()> {
        if self.a.is_none() && self.b.is_none() {
            return Err(Error::Corrupt("container carries no description".into()));
        }
        let d = DOWNSAMPLE as u32;
        if u32::from(self.width) != d * u32::from(self.n) || u32::from(self.height) != d * u32::from(self.m) {
            return Err(Error::Corrupt(format!(
                "{}x{} image does not match a {}x{} feature grid",
                self.width, self.height, self.n, self.m
            )));
        }
        if self.k == 0 || self.l < 2 {
            return Err(Error::Corrupt(format!("invalid K={} or L={}", self.k, self.l)));
        }
        let count = usize::from(self.m) * usize::from(self.n) * usize::from(self.k);
        for (side, d) in [(Side::A, &self.a), (Side::B, &self.b)] {
            if let Some(d) = d {
                if d.side != side || d.symbols != count {
                    return Err(Error::Corrupt(format!("description {} does not fit the header", side.tag())));
                }
            }
        }
        Ok(())
    }

    pub fn description(&self, side: Side) -> Option<&CodedDescription> {
        match side {
            Side::A => self.a.as_ref(),
            Side::B => self.b.as_ref(),
        }
    }

    pub fn symbols_per_description(&self) -> usize {
        usize::from(self.m) * usize::from(self.n) * usize::from(self.k)
    }

    /// Payload bits of the present descriptions per image pixel.
    pub fn payload_bpp(&self) -> f64 {
        let bits: usize = [&self.a, &self.b].into_iter().flatten().map(|d| d.bits()).sum();
        bits as f64 / (f64::from(self.width) * f64::from(self.height))
    }

    pub fn description_bpp(&self, side: Side) -> Option<f64> {
        self.description(side).map(|d| d.bits() as f64 / (f64::from(self.width) * f64::from(self.height)))
    }

    /// Drops one description, as a lossy channel would.
    pub fn without(&self, side: Side) -> Self {
        let mut c = self.clone();
        match side {
            Side::A => c.a = None,
            Side::B => c.b = None,
        }
        c
    }

    pub fn pack(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        let flags = if self.a.is_some() { FLAG_A } else { 0 } | if self.b.is_some() { FLAG_B } else { 0 };
        out.push(flags);
        for v in [self.width, self.height, self.m, self.n] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.k);
        out.push(self.l);
        for d in [&self.a, &self.b] {
            match d {
                Some(d) => {
                    let len = u32::try_from(d.payload.len())
                        .map_err(|_| Error::InvalidArgument("payload longer than 4 GiB".into()))?;
                    out.push(1);
                    out.extend_from_slice(&d.model_hash.to_le_bytes());
                    out.extend_from_slice(&d.checksum.to_le_bytes());
                    out.extend_from_slice(&len.to_le_bytes());
                    out.extend_from_slice(&d.payload);
                }
                None => out.push(0),
            }
        }
        Ok(out)
    }

    pub fn unpack(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.array::<4>()? != MAGIC {
            return Err(Error::BadMagic { expected: "MDQ1" });
        }
        let version = r.u8()?;
        if version != FORMAT_VERSION {
            return Err(Error::BadVersion { found: version.into(), expected: FORMAT_VERSION.into() });
        }
        let flags = r.u8()?;
        if flags & !(FLAG_A | FLAG_B) != 0 {
            return Err(Error::Corrupt(format!("unknown flag bits {flags:#04x}")));
        }
        let (width, height, m, n) = (r.u16()?, r.u16()?, r.u16()?, r.u16()?);
        let (k, l) = (r.u8()?, r.u8()?);
        let count = usize::from(m) * usize::from(n) * usize::from(k);
        let mut read = |side: Side, flag: u8| -> Result<Option<CodedDescription>> {
            let present = r.u8()?;
            if present > 1 || (present == 1) != (flags & flag != 0) {
                return Err(Error::Corrupt(format!("presence of description {} is inconsistent", side.tag())));
            }
            if present == 0 {
                return Ok(None);
            }
            let model_hash = r.u64()?;
            let checksum = r.u32()?;
            let len = r.u32()? as usize;
            let payload = r.take(len)?.to_vec();
            Ok(Some(CodedDescription { side, model_hash, checksum, symbols: count, payload }))
        };
        let a = read(Side::A, FLAG_A)?;
        let b = read(Side::B, FLAG_B)?;
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes after offset {}", r.remaining(), r.position())));
        }
        let c = MdqContainer { width, height, m, n, k, l, a, b };
        c.validate()?;
        Ok(c)
    }
}
