//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::diff::DEFAULT_LEARNING_RATE;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SsimConfig, SsimPreset};
use crate::networks::{NetConfig, DOWNSAMPLE};
use crate::quant::SigmaSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub crop: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub steps: u64,
    pub seed: u64,
    pub loss: LossWeights,
    pub net: NetConfig,
    pub sigma: SigmaSchedule,
    /// Progress is logged every this many steps; 0 disables logging.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop: 64,
            batch: 4,
            learning_rate: DEFAULT_LEARNING_RATE,
            steps: 300,
            seed: 0,
            loss: LossWeights::default(),
            net: NetConfig::default(),
            sigma: SigmaSchedule::Fixed(1.0),
            log_every: 25,
        }
    }
}

/// Every accepted key, in the order [`TrainConfig::to_text`] writes them.
pub const KEYS: [&str; 21] = [
    "crop",
    "batch",
    "learning_rate",
    "steps",
    "seed",
    "log_every",
    "alpha",
    "beta",
    "gamma",
    "psi",
    "base_channels",
    "k",
    "l",
    "resconv_repeats",
    "share_decoders",
    "use_importance",
    "ssim_preset",
    "entropy_channels",
    "sigma",
    "sigma_growth",
    "sigma_max",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        if !self.crop.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Config(format!("crop {} is not a multiple of {DOWNSAMPLE}", self.crop)));
        }
        let min = self.ssim()?.min_size();
        if self.crop < min {
            return Err(Error::Config(format!(
                "crop {} is below the {min} pixels five similarity scales need",
                self.crop
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        let (start, growth, max) = self.sigma_parts();
        if !(start > 0.0 && growth >= 1.0 && max >= start) || !max.is_finite() {
            return Err(Error::Config(format!("invalid sigma schedule {:?}", self.sigma)));
        }
        Ok(())
    }

    /// Similarity settings used by the training objective for this crop.
    pub fn ssim(&self) -> Result<SsimConfig> {
        SsimConfig::for_crop(self.net.ssim_preset, self.crop)
    }

    fn sigma_parts(&self) -> (f64, f64, f64) {
        match self.sigma {
            SigmaSchedule::Fixed(s) => (s, 1.0, s),
            SigmaSchedule::Geometric { start, factor, max } => (start, factor, max),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let n = &mut self.net;
        let w = &mut self.loss;
        match key {
            "crop" => self.crop = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "alpha" => w.alpha = parse(key, value)?,
            "beta" => w.beta = parse(key, value)?,
            "gamma" => w.gamma = parse(key, value)?,
            "psi" => w.psi = parse(key, value)?,
            "base_channels" => n.base_channels = parse(key, value)?,
            "k" => n.latent_channels = parse(key, value)?,
            "l" => n.levels = parse(key, value)?,
            "resconv_repeats" => n.resconv_repeats = parse(key, value)?,
            "share_decoders" => n.share_decoders = parse(key, value)?,
            "use_importance" => n.use_importance = parse(key, value)?,
            "ssim_preset" => n.ssim_preset = SsimPreset::parse(value)?,
            "entropy_channels" => n.entropy_channels = parse(key, value)?,
            "sigma" | "sigma_growth" | "sigma_max" => {
                let (mut start, mut growth, mut max) = self.sigma_parts();
                let v: f64 = parse(key, value)?;
                match key {
                    "sigma" => {
                        // a fixed schedule keeps its cap in step with the value
                        if growth == 1.0 {
                            max = v;
                        }
                        start = v;
                    }
                    "sigma_growth" => growth = v,
                    _ => max = v,
                }
                self.sigma = if growth == 1.0 && max == start {
                    SigmaSchedule::Fixed(start)
                } else {
                    SigmaSchedule::Geometric { start, factor: growth, max }
                };
            }
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let n = &self.net;
        let w = &self.loss;
        let (start, growth, max) = self.sigma_parts();
        let values: [String; 21] = [
            self.crop.to_string(),
            self.batch.to_string(),
            self.learning_rate.to_string(),
            self.steps.to_string(),
            self.seed.to_string(),
            self.log_every.to_string(),
            w.alpha.to_string(),
            w.beta.to_string(),
            w.gamma.to_string(),
            w.psi.to_string(),
            n.base_channels.to_string(),
            n.latent_channels.to_string(),
            n.levels.to_string(),
            n.resconv_repeats.to_string(),
            n.share_decoders.to_string(),
            n.use_importance.to_string(),
            n.ssim_preset.name().to_string(),
            n.entropy_channels.to_string(),
            start.to_string(),
            growth.to_string(),
            max.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
