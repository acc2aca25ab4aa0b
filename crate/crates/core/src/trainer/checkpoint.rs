//! Versioned little-endian checkpoint: network config, every parameter by
//! name with a manifest of shapes and offsets, and optional optimizer state.

use std::path::Path;

use crate::bytes::Reader;
use crate::diff::{AdamState, ParamKind};
use crate::error::{Error, Result};
use crate::losses::SsimPreset;
use crate::networks::{CodecModel, NetConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MDQC";
pub const CHECKPOINT_VERSION: u8 = 1;

pub struct Checkpoint<T> {
    pub model: CodecModel<T>,
    pub adam: Option<AdamState<T>>,
}

struct Entry {
    name: String,
    kind: ParamKind,
    trainable: bool,
    shape: Vec<usize>,
    offset: u64,
    count: u64,
}

fn kind_tag(k: ParamKind) -> u8 {
    match k {
        ParamKind::Kernel => 0,
        ParamKind::Bias => 1,
        ParamKind::Centers => 2,
    }
}

fn kind_from(tag: u8) -> Result<ParamKind> {
    match tag {
        0 => Ok(ParamKind::Kernel),
        1 => Ok(ParamKind::Bias),
        2 => Ok(ParamKind::Centers),
        t => Err(Error::Corrupt(format!("unknown parameter kind {t}"))),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn write_config(out: &mut Vec<u8>, c: &NetConfig) -> Result<()> {
    put_u32(out, c.base_channels)?;
    put_u32(out, c.latent_channels)?;
    put_u32(out, c.levels)?;
    put_u32(out, c.resconv_repeats)?;
    out.push(u8::from(c.share_decoders));
    out.push(u8::from(c.use_importance));
    out.push(match c.ssim_preset {
        SsimPreset::Mr => 0,
        SsimPreset::Ms => 1,
    });
    put_u32(out, c.entropy_channels)
}

fn read_bool(r: &mut Reader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Corrupt(format!("bad boolean byte {v}"))),
    }
}

fn read_config(r: &mut Reader) -> Result<NetConfig> {
    let base_channels = r.u32()? as usize;
    let latent_channels = r.u32()? as usize;
    let levels = r.u32()? as usize;
    let resconv_repeats = r.u32()? as usize;
    let share_decoders = read_bool(r)?;
    let use_importance = read_bool(r)?;
    let ssim_preset = match r.u8()? {
        0 => SsimPreset::Mr,
        1 => SsimPreset::Ms,
        v => return Err(Error::Corrupt(format!("unknown ssim preset tag {v}"))),
    };
    let entropy_channels = r.u32()? as usize;
    Ok(NetConfig {
        base_channels,
        latent_channels,
        levels,
        resconv_repeats,
        share_decoders,
        use_importance,
        ssim_preset,
        entropy_channels,
    })
}

pub fn checkpoint_bytes<T: Scalar>(model: &CodecModel<T>, adam: Option<&AdamState<T>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.push(T::DTYPE);
    write_config(&mut out, &model.cfg)?;
    match adam {
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            for v in [a.lr, a.beta1, a.beta2, a.eps] {
                out.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
        None => out.push(0),
    }
    put_u32(&mut out, model.store.len())?;
    let mut offset = 0u64;
    for (_, p) in model.store.iter() {
        let name = p.id.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name `{}` too long", p.id)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(kind_tag(p.kind));
        out.push(u8::from(p.trainable));
        out.push(p.tensor.rank() as u8);
        for &d in p.tensor.shape() {
            put_u32(&mut out, d)?;
        }
        let count = p.tensor.len() as u64;
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        offset += count * T::BYTES as u64;
    }
    let mut data = Vec::new();
    for (_, p) in model.store.iter() {
        p.tensor.data().iter().for_each(|&v| v.write_le(&mut data));
    }
    if let Some(a) = adam {
        if a.first.len() != model.store.len() || a.second.len() != model.store.len() {
            return Err(Error::InvalidArgument("optimizer state does not match the model".into()));
        }
        for t in a.first.iter().chain(&a.second) {
            t.data().iter().for_each(|&v| v.write_le(&mut data));
        }
    }
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(&data);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn read_values<T: Scalar>(bytes: &[u8], dtype: u8) -> Vec<T> {
    match dtype {
        4 => bytes.chunks_exact(4).map(|c| T::of(f64::from(f32::read_le(c)))).collect(),
        _ => bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    }
}

/// Parses a checkpoint; values stored at another precision are converted.
pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader::new(bytes);
    if r.array::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: "MDQC" });
    }
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion { found: version.into(), expected: CHECKPOINT_VERSION.into() });
    }
    if bytes.len() < 4 + 4 {
        return Err(Error::Truncated { needed: 8, offset: 0, available: bytes.len() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("four bytes")) {
        return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
    }
    let dtype = r.u8()?;
    let width = match dtype {
        4 | 8 => usize::from(dtype),
        d => return Err(Error::Corrupt(format!("unknown dtype tag {d}"))),
    };
    let cfg = read_config(&mut r)?;
    let adam_head = if read_bool(&mut r)? {
        let step = r.u64()?;
        let mut h = [0.0; 4];
        for v in &mut h {
            *v = f64::from_le_bytes(r.array()?);
        }
        Some((step, h))
    } else {
        None
    };
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = usize::from(r.u16()?);
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?;
        let kind = kind_from(r.u8()?)?;
        let trainable = read_bool(&mut r)?;
        let rank = usize::from(r.u8()?);
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        let count = r.u64()?;
        entries.push(Entry { name, kind, trainable, shape, offset, count });
    }
    let data_len = r.u64()? as usize;
    let data = r.take(data_len)?;
    if r.remaining() != 4 {
        return Err(Error::Corrupt(format!("{} unexpected bytes before the checksum", r.remaining() - 4)));
    }

    let mut model = CodecModel::<T>::new(cfg, 0)?;
    if entries.len() != model.store.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint lists {} parameters, the configured model has {}",
            entries.len(),
            model.store.len()
        )));
    }
    let params_bytes: usize = entries.iter().map(|e| e.count as usize * width).sum();
    let mut ids = Vec::with_capacity(entries.len());
    for e in &entries {
        let id =
            model.store.lookup(&e.name).ok_or_else(|| Error::Corrupt(format!("unknown parameter `{}`", e.name)))?;
        let p = model.store.get_mut(id);
        if p.tensor.shape() != e.shape.as_slice() || p.kind != e.kind || e.count as usize != p.tensor.len() {
            return Err(Error::Corrupt(format!(
                "parameter `{}` is {:?} in the checkpoint, model expects {:?}",
                e.name,
                e.shape,
                p.tensor.shape()
            )));
        }
        let start = e.offset as usize;
        let end = start + e.count as usize * width;
        if end > params_bytes {
            return Err(Error::Corrupt(format!("parameter `{}` lies outside the data section", e.name)));
        }
        p.tensor = Tensor::new(e.shape.clone(), read_values(&data[start..end], dtype))?;
        p.trainable = e.trainable;
        ids.push(id);
    }
    let adam = match adam_head {
        None => {
            if data_len != params_bytes {
                return Err(Error::Corrupt("data section length does not match the manifest".into()));
            }
            None
        }
        Some((step, [lr, beta1, beta2, eps])) => {
            if data_len != 3 * params_bytes {
                return Err(Error::Corrupt("optimizer moments do not match the manifest".into()));
            }
            let mut state = AdamState::new(&model.store, lr);
            state.step = step;
            state.beta1 = T::of(beta1);
            state.beta2 = T::of(beta2);
            state.eps = T::of(eps);
            let mut cursor = params_bytes;
            for moments in [&mut state.first, &mut state.second] {
                for (e, id) in entries.iter().zip(&ids) {
                    let n = e.count as usize * width;
                    moments[id.0] = Tensor::new(e.shape.clone(), read_values(&data[cursor..cursor + n], dtype))?;
                    cursor += n;
                }
            }
            Some(state)
        }
    };
    Ok(Checkpoint { model, adam })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &CodecModel<T>, adam: Option<&AdamState<T>>) -> Result<()> {
    let bytes = checkpoint_bytes(model, adam)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// Loads a checkpoint and insists on the given network configuration.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &NetConfig) -> Result<Checkpoint<T>> {
    let ck = load_checkpoint(path)?;
    if &ck.model.cfg != expected {
        return Err(Error::Config(format!(
            "checkpoint was trained with {:?}, but {:?} was requested",
            ck.model.cfg, expected
        )));
    }
    Ok(ck)
}
