//! Evaluation through the real bitstream, and the lossy-channel simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::Graph;
use crate::entroc::{decode_container, encode_container, MdqContainer};
use crate::error::{Error, Result};
use crate::losses::{ms_ssim_values, ssim_values, SsimConfig, SsimPreset};
use crate::networks::{rate_estimate, CodecModel};
use crate::quant::{self, Side, SymbolTensor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const EVAL_HEADER: &str = "image,decoder,bpp,est_bpp,ssim,ms_ssim,mr_ssim";
pub const SIM_HEADER: &str = "outcome,trials,fraction,mean_ms_ssim";

/// One image pushed through encode, container, decode and reconstruction.
pub struct CodedImage<T> {
    pub container: MdqContainer,
    pub side_a: Tensor<T>,
    pub side_b: Tensor<T>,
    pub central: Tensor<T>,
    /// Context-model estimate, bits per symbol.
    pub est_bits_a: f64,
    pub est_bits_b: f64,
}

impl<T> CodedImage<T> {
    fn pixels(&self) -> f64 {
        f64::from(self.container.width) * f64::from(self.container.height)
    }

    /// Estimated bits per pixel of one description.
    pub fn est_bpp(&self, side: Side) -> f64 {
        let bits = match side {
            Side::A => self.est_bits_a,
            Side::B => self.est_bits_b,
        };
        bits * self.container.symbols_per_description() as f64 / self.pixels()
    }

    pub fn real_bpp(&self, side: Side) -> f64 {
        self.container.description_bpp(side).unwrap_or(0.0)
    }
}

fn estimated_bits<T: Scalar>(model: &CodecModel<T>, sym: &SymbolTensor, side: Side) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.input(quant::dequantize(sym, model.centers(side))?);
    let p = model.entropy_forward(&mut g, v, side)?;
    let r = rate_estimate(&mut g, p, sym)?;
    Ok(g.scalar(r).f64())
}

/// Codes a `[1,H,W,3]` image and reconstructs all three outputs from the
/// decoded bitstream.
pub fn code_image<T: Scalar>(model: &CodecModel<T>, x: &Tensor<T>) -> Result<CodedImage<T>> {
    if x.rank() != 4 || x.shape()[0] != 1 {
        return Err(Error::shape("code_image", format!("expected one [1,H,W,3] image, got {:?}", x.shape())));
    }
    let (sa, sb) = model.analyze(x)?;
    let container = encode_container(model, &sa, &sb)?;
    let da = decode_container(model, &container, Side::A)?.expect("description a was just encoded");
    let db = decode_container(model, &container, Side::B)?.expect("description b was just encoded");
    if da != sa || db != sb {
        return Err(Error::Corrupt("bitstream did not reproduce the encoded symbols".into()));
    }
    Ok(CodedImage {
        side_a: model.reconstruct(Some(&da), None)?,
        side_b: model.reconstruct(None, Some(&db))?,
        central: model.reconstruct(Some(&da), Some(&db))?,
        est_bits_a: estimated_bits(model, &sa, Side::A)?,
        est_bits_b: estimated_bits(model, &sb, Side::B)?,
        container,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub image: String,
    /// `side_a`, `side_b` or `central`.
    pub decoder: &'static str,
    pub bpp: f64,
    pub est_bpp: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub mr_ssim: f64,
}

impl EvalRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.image, self.decoder, self.bpp, self.est_bpp, self.ssim, self.ms_ssim, self.mr_ssim
        )
    }
}

/// SSIM, MS-SSIM and MR-SSIM of `y` against `x`; the window follows the
/// image size as in training.
pub fn quality<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<[f64; 3]> {
    let side = x.shape()[1].min(x.shape()[2]);
    let ms = SsimConfig::for_crop(SsimPreset::Ms, side)?;
    let mr = SsimConfig::for_crop(SsimPreset::Mr, side)?;
    Ok([ssim_values(x, y, &ms)?[0], ms_ssim_values(x, y, &ms)?[0], ms_ssim_values(x, y, &mr)?[0]])
}

/// Three rows per image (side A, side B, central). The central rate is the
/// sum of both payloads.
pub fn evaluate<T: Scalar>(model: &CodecModel<T>, images: &[(String, Tensor<T>)]) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(images.len() * 3);
    for (name, x) in images {
        let c = code_image(model, x)?;
        let (ra, rb) = (c.real_bpp(Side::A), c.real_bpp(Side::B));
        let (ea, eb) = (c.est_bpp(Side::A), c.est_bpp(Side::B));
        for (decoder, y, bpp, est) in
            [("side_a", &c.side_a, ra, ea), ("side_b", &c.side_b, rb, eb), ("central", &c.central, ra + rb, ea + eb)]
        {
            let [ssim, ms_ssim, mr_ssim] = quality(x, y)?;
            rows.push(EvalRow { image: name.clone(), decoder, bpp, est_bpp: est, ssim, ms_ssim, mr_ssim });
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    Central,
    SideA,
    SideB,
    Outage,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [Outcome::Central, Outcome::SideA, Outcome::SideB, Outcome::Outage];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Central => "central",
            Outcome::SideA => "side_a",
            Outcome::SideB => "side_b",
            Outcome::Outage => "outage",
        }
    }
}

/// Each description is lost independently with probability `p`.
pub fn channel_outcomes(p: f64, trials: usize, seed: u64) -> Result<Vec<Outcome>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("loss probability {p} outside [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..trials)
        .map(|_| {
            let lost_a = rng.gen::<f64>() < p;
            let lost_b = rng.gen::<f64>() < p;
            match (lost_a, lost_b) {
                (false, false) => Outcome::Central,
                (false, true) => Outcome::SideA,
                (true, false) => Outcome::SideB,
                (true, true) => Outcome::Outage,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimRow {
    pub outcome: Outcome,
    pub trials: usize,
    pub fraction: f64,
    /// Mean MS-SSIM over trials of this class; `None` for outages or empty classes.
    pub mean_ms_ssim: Option<f64>,
}

impl SimRow {
    pub fn csv(&self) -> String {
        let q = self.mean_ms_ssim.map_or_else(String::new, |v| format!("{v:.6}"));
        format!("{},{},{:.6},{q}", self.outcome.name(), self.trials, self.fraction)
    }
}

/// Trial `t` transmits image `t mod n` over the lossy channel.
pub fn simulate<T: Scalar>(
    model: &CodecModel<T>,
    images: &[(String, Tensor<T>)],
    p: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<SimRow>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("simulation needs at least one image".into()));
    }
    let outcomes = channel_outcomes(p, trials, seed)?;
    // MS-SSIM of side A, side B and central per image
    let mut per_image = Vec::with_capacity(images.len());
    for (_, x) in images {
        let c = code_image(model, x)?;
        let q = |y: &Tensor<T>| quality(x, y).map(|v| v[1]);
        per_image.push([q(&c.side_a)?, q(&c.side_b)?, q(&c.central)?]);
    }
    Ok(Outcome::ALL
        .iter()
        .map(|&o| {
            let hits: Vec<usize> = (0..trials).filter(|&t| outcomes[t] == o).collect();
            let col = match o {
                Outcome::SideA => Some(0),
                Outcome::SideB => Some(1),
                Outcome::Central => Some(2),
                Outcome::Outage => None,
            };
            let mean_ms_ssim = col
                .filter(|_| !hits.is_empty())
                .map(|c| hits.iter().map(|&t| per_image[t % images.len()][c]).sum::<f64>() / hits.len() as f64);
            SimRow {
                outcome: o,
                trials: hits.len(),
                fraction: if trials == 0 { 0.0 } else { hits.len() as f64 / trials as f64 },
                mean_ms_ssim,
            }
        })
        .collect())
}
