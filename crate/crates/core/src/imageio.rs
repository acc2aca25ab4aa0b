//! 8-bit RGB image I/O and the conversions to and from `[1,H,W,3]` tensors.

use std::path::Path;

use image::{imageops, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
    Ok(img.to_rgb8())
}

/// `[1,H,W,3]` tensor with values in `[0,1]`.
pub fn to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| T::of(f64::from(v) / 255.0)).collect();
    Tensor::new(vec![1, h as usize, w as usize, 3], data).expect("rgb buffer matches its dimensions")
}

/// Rounds a `[1,H,W,3]` tensor to 8 bits, clamping to `[0,1]` first.
pub fn to_image<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[3] != 3 {
        return Err(Error::shape("to_image", format!("expected [1,H,W,3], got {s:?}")));
    }
    let raw = t.data().iter().map(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(RgbImage::from_raw(s[2] as u32, s[1] as u32, raw).expect("buffer matches its dimensions"))
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    Ok(to_tensor(&read_rgb(path)?))
}

/// Writes PNG or binary PPM, chosen by the file extension.
pub fn save_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let format = ImageFormat::from_path(path).map_err(|source| Error::Image { path: path.into(), source })?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Pnm) {
        return Err(Error::InvalidArgument(format!("{}: only .png and .ppm outputs are supported", path.display())));
    }
    to_image(t)?.save_with_format(path, format).map_err(|source| Error::Image { path: path.into(), source })
}

/// Largest centered region whose sides are multiples of `m`; `None` when the
/// image already fits.
pub fn center_crop_to_multiple(img: &RgbImage, m: u32) -> Result<Option<RgbImage>> {
    let (w, h) = img.dimensions();
    let (cw, ch) = (w / m * m, h / m * m);
    if cw == 0 || ch == 0 {
        return Err(Error::InvalidArgument(format!("image {w}x{h} is smaller than {m}x{m}")));
    }
    if (cw, ch) == (w, h) {
        return Ok(None);
    }
    Ok(Some(imageops::crop_imm(img, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image()))
}

/// Upscales so the shorter side is at least `min_side`, keeping the aspect ratio.
pub fn resize_to_min_side(img: &RgbImage, min_side: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let short = w.min(h);
    if short >= min_side {
        return img.clone();
    }
    let scale = f64::from(min_side) / f64::from(short);
    let nw = ((f64::from(w) * scale).ceil() as u32).max(min_side);
    let nh = ((f64::from(h) * scale).ceil() as u32).max(min_side);
    imageops::resize(img, nw, nh, imageops::FilterType::Triangle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8, y as u8, (x + y) as u8]))
    }

    #[test]
    fn tensor_round_trip_is_lossless_for_8_bit() {
        let img = gradient(16, 8);
        let t = to_tensor::<f32>(&img);
        assert_eq!(t.shape(), [1, 8, 16, 3]);
        assert_eq!(to_image(&t).unwrap(), img);
    }

    #[test]
    fn png_and_ppm_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = to_tensor::<f32>(&gradient(24, 16));
        for name in ["a.png", "a.ppm"] {
            let p = dir.path().join(name);
            save_tensor(&p, &t).unwrap();
            assert_eq!(load_tensor::<f32>(&p).unwrap(), t);
        }
        assert!(save_tensor(&dir.path().join("a.gif"), &t).is_err());
    }

    #[test]
    fn crop_policy() {
        let c = center_crop_to_multiple(&gradient(510, 510), 8).unwrap().unwrap();
        assert_eq!(c.dimensions(), (504, 504));
        assert_eq!(c.get_pixel(0, 0), gradient(510, 510).get_pixel(3, 3));
        assert!(center_crop_to_multiple(&gradient(64, 48), 8).unwrap().is_none());
        assert!(center_crop_to_multiple(&gradient(7, 48), 8).is_err());
    }

    #[test]
    fn resize_reaches_min_side() {
        let r = resize_to_min_side(&gradient(100, 100), 160);
        assert_eq!(r.dimensions(), (160, 160));
        let r = resize_to_min_side(&gradient(100, 50), 64);
        assert_eq!(r.dimensions(), (128, 64));
        assert_eq!(resize_to_min_side(&gradient(70, 80), 64).dimensions(), (70, 80));
    }
}
