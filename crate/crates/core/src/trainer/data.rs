//! Training corpus and seeded random-crop batches.

use std::collections::HashSet;
use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio;
use crate::networks::DOWNSAMPLE;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tries per batch item before a repeated crop location is accepted (only
/// happens when an image has fewer distinct locations than the batch needs).
const DISTINCT_TRIES: usize = 64;

#[derive(Clone, Debug)]
pub struct Corpus {
    pub names: Vec<String>,
    pub images: Vec<RgbImage>,
    /// Upscaled copies for images whose shorter side is below the crop.
    resized: Vec<Option<RgbImage>>,
    crop: usize,
}

/// One `[B,crop,crop,3]` training batch in `[0,1]`.
pub struct Batch<T> {
    pub images: Tensor<T>,
    /// `(image index, top, left)` of every crop.
    pub origins: Vec<(usize, u32, u32)>,
}

/// Loads every decodable image in `dir` (sorted by file name). Unreadable
/// files are skipped with a warning; an empty result is an error.
pub fn load_corpus(dir: &Path, crop: usize) -> Result<Corpus> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
    paths.sort();
    let mut names = Vec::new();
    let mut images = Vec::new();
    for p in paths {
        match imageio::read_rgb(&p) {
            Ok(img) => {
                names.push(p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()));
                images.push(img);
            }
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    Corpus::new(names, images, crop).map_err(|e| match e {
        Error::InvalidArgument(_) => Error::InvalidArgument(format!("no decodable images in {}", dir.display())),
        other => other,
    })
}

impl Corpus {
    pub fn new(names: Vec<String>, images: Vec<RgbImage>, crop: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty corpus".into()));
        }
        if crop == 0 || names.len() != images.len() {
            return Err(Error::InvalidArgument("corpus needs one name per image and a nonzero crop".into()));
        }
        let resized = images
            .iter()
            .map(|img| {
                (img.width().min(img.height()) < crop as u32).then(|| imageio::resize_to_min_side(img, crop as u32))
            })
            .collect();
        Ok(Corpus { names, images, resized, crop })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn crop(&self) -> usize {
        self.crop
    }

    /// Source used for cropping: the upscaled copy when one exists.
    pub fn training_view(&self, i: usize) -> &RgbImage {
        self.resized[i].as_ref().unwrap_or(&self.images[i])
    }

    /// Image visiting order of one epoch.
    fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch.wrapping_add(1) << 32);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Batch number `step`; a pure function of `(seed, step, batch)`, so a
    /// resumed run sees the same data as an uninterrupted one.
    pub fn batch_at<T: Scalar>(&self, step: u64, batch: usize, seed: u64) -> Result<Batch<T>> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        let c = self.crop as u32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        let n = self.len() as u64;
        let mut seen = HashSet::new();
        let mut origins = Vec::with_capacity(batch);
        let mut data = Vec::with_capacity(batch * self.crop * self.crop * 3);
        for i in 0..batch as u64 {
            let slot = step * batch as u64 + i;
            let idx = self.epoch_order(seed, slot / n)[(slot % n) as usize];
            let img = self.training_view(idx);
            let (h, w) = (img.height(), img.width());
            let mut origin = (idx, 0, 0);
            for _ in 0..DISTINCT_TRIES {
                origin = (idx, rng.gen_range(0..=h - c), rng.gen_range(0..=w - c));
                if seen.insert(origin) {
                    break;
                }
            }
            let (_, top, left) = origin;
            for y in top..top + c {
                for x in left..left + c {
                    data.extend(img.get_pixel(x, y).0.iter().map(|&v| T::of(f64::from(v) / 255.0)));
                }
            }
            origins.push(origin);
        }
        let images = Tensor::new(vec![batch, self.crop, self.crop, 3], data)?;
        Ok(Batch { images, origins })
    }

    /// Endless stream of batches starting at `start`.
    pub fn batches<T: Scalar>(
        &self,
        batch: usize,
        seed: u64,
        start: u64,
    ) -> impl Iterator<Item = Result<Batch<T>>> + '_ {
        (start..).map(move |s| self.batch_at(s, batch, seed))
    }

    /// Whole images, center-cropped to multiples of 8, for evaluation.
    pub fn eval_images<T: Scalar>(&self) -> Result<Vec<(String, Tensor<T>)>> {
        self.names
            .iter()
            .zip(&self.images)
            .map(|(name, img)| {
                let cropped = imageio::center_crop_to_multiple(img, DOWNSAMPLE as u32)?;
                if let Some(c) = &cropped {
                    log::warn!(
                        "{name}: {}x{} center-cropped to {}x{}",
                        img.width(),
                        img.height(),
                        c.width(),
                        c.height()
                    );
                }
                Ok((name.clone(), imageio::to_tensor(cropped.as_ref().unwrap_or(img))))
            })
            .collect()
    }
}
