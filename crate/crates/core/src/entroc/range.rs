//! Multi-symbol range coder over 16-bit fixed-point frequency tables.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
const TOP: u32 = 1 << 24;

/// Bytes the encoder always emits even for an empty stream.
pub const FLUSH_BYTES: usize = 5;

/// Integer frequencies summing to [`FREQ_TOTAL`], each at least one:
/// `f_i = 1 + floor(p_i (2^16 - L))`, with the rounding remainder given to
/// the most probable symbol (lowest index on ties).
pub fn quantize_probs<T: Scalar>(probs: &[T], out: &mut [u32]) -> Result<()> {
    let l = probs.len();
    if l < 2 || l as u32 > FREQ_TOTAL / 2 || out.len() != l {
        return Err(Error::InvalidArgument(format!("cannot build a frequency table over {l} symbols")));
    }
    let budget = f64::from(FREQ_TOTAL - l as u32);
    let mut best = 0;
    let mut sum = 0u32;
    for (i, (&p, f)) in probs.iter().zip(out.iter_mut()).enumerate() {
        let p = p.f64();
        if !p.is_finite() || p < 0.0 {
            return Err(Error::NonFinite(format!("probability {p} at symbol {i}")));
        }
        *f = 1 + (p.min(1.0) * budget).floor() as u32;
        sum += *f;
        if probs[i] > probs[best] {
            best = i;
        }
    }
    if sum <= FREQ_TOTAL {
        out[best] += FREQ_TOTAL - sum;
    } else {
        let excess = sum - FREQ_TOTAL;
        if out[best] <= excess {
            return Err(Error::InvalidArgument("probabilities sum well above one".into()));
        }
        out[best] -= excess;
    }
    Ok(())
}

/// Ideal code length of `symbol` in bits under a quantized table.
pub fn code_length(freqs: &[u32], symbol: usize) -> f64 {
    f64::from(FREQ_BITS) - f64::from(freqs[symbol]).log2()
}

fn cumulative(freqs: &[u32], symbol: usize) -> u32 {
    freqs[..symbol].iter().sum()
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    pub fn encode(&mut self, freqs: &[u32], symbol: usize) -> Result<()> {
        let f = *freqs.get(symbol).ok_or(Error::SymbolOutOfRange { index: symbol, levels: freqs.len() })?;
        if f == 0 {
            return Err(Error::InvalidArgument(format!("symbol {symbol} has zero frequency")));
        }
        let r = self.range >> FREQ_BITS;
        self.low += u64::from(r) * u64::from(cumulative(freqs, symbol));
        self.range = r * f;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..FLUSH_BYTES {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        if input.len() < FLUSH_BYTES {
            return Err(Error::Truncated { needed: FLUSH_BYTES, offset: 0, available: input.len() });
        }
        if input[0] != 0 {
            return Err(Error::Corrupt("range-coded payload must start with a zero byte".into()));
        }
        let code = u32::from_be_bytes(input[1..5].try_into().expect("four bytes"));
        Ok(RangeDecoder { code, range: u32::MAX, input, pos: FLUSH_BYTES })
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.input.get(self.pos).ok_or(Error::Truncated { needed: 1, offset: self.pos, available: 0 })?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, freqs: &[u32]) -> Result<usize> {
        let r = self.range >> FREQ_BITS;
        let target = (self.code / r).min(FREQ_TOTAL - 1);
        let mut cum = 0;
        let mut symbol = freqs.len();
        for (i, &f) in freqs.iter().enumerate() {
            if target < cum + f {
                symbol = i;
                break;
            }
            cum += f;
        }
        if symbol == freqs.len() {
            return Err(Error::Corrupt("code value beyond the frequency table".into()));
        }
        self.code -= r * cum;
        self.range = r * freqs[symbol];
        if self.code >= self.range {
            return Err(Error::Corrupt("code value outside the coding interval".into()));
        }
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn consumed(&self) -> usize {
        self.pos
    }
}
