//! Raw convolution kernels over NHWC / NDHWC buffers.
//!
//! Every routine computes each output element on a single thread with a fixed
//! accumulation order, so results are bitwise reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding, output size `ceil(in / stride)`.
    Same,
    Valid,
}

/// Geometry of one 2D convolution `[B,H,W,Cin] -> [B,OH,OW,Cout]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub oh: usize,
    pub ow: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn same_pad(input: usize, out: usize, k_eff: usize, stride: usize) -> usize {
    let total = ((out - 1) * stride + k_eff).saturating_sub(input);
    total / 2
}

impl Conv2dGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, dilation: usize, padding: Padding) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected input [B,H,W,C] and kernel [kh,kw,Cin,Cout], got {input:?} and {kernel:?}"),
            ));
        }
        let (batch, h, w, cin) = (input[0], input[1], input[2], input[3]);
        let (kh, kw, kcin, cout) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input {input:?} has {cin} channels but kernel {kernel:?} expects {kcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv2d kernel extent must be odd, got {kh}x{kw}")));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidArgument("conv2d stride and dilation must be >= 1".into()));
        }
        let (keh, kew) = ((kh - 1) * dilation + 1, (kw - 1) * dilation + 1);
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                (oh, ow, same_pad(h, oh, keh, stride), same_pad(w, ow, kew, stride))
            }
            Padding::Valid => {
                if h < keh || w < kew {
                    return Err(Error::shape(
                        "conv2d",
                        format!("valid conv needs at least {keh}x{kew} input, got {h}x{w}"),
                    ));
                }
                ((h - keh) / stride + 1, (w - kew) / stride + 1, 0, 0)
            }
        };
        Ok(Conv2dGeom { batch, h, w, cin, oh, ow, cout, kh, kw, stride, dilation, pad_top, pad_left })
    }

    /// Geometry of the convolution whose adjoint maps `[B,h,w,cout]` to
    /// `[B,h*stride,w*stride,cin]`.
    pub fn transpose_of(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("expected input [B,H,W,C] and kernel [kh,kw,Cout,Cin], got {input:?} and {kernel:?}"),
            ));
        }
        if kernel[3] != input[3] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {input:?} has {} channels but kernel {kernel:?} expects {}", input[3], kernel[3]),
            ));
        }
        let out = [input[0], input[1] * stride, input[2] * stride, kernel[2]];
        let g = Self::new(&out, kernel, stride, 1, Padding::Same)?;
        debug_assert_eq!((g.oh, g.ow), (input[1], input[2]));
        Ok(g)
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.h, self.w, self.cin]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.oh, self.ow, self.cout]
    }

    #[inline]
    fn in_coord(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k * self.dilation) as isize - pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }

    /// Output coordinate that reads input coordinate `i` through tap `k`.
    #[inline]
    fn out_coord(&self, i: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let t = (i + pad) as isize - (k * self.dilation) as isize;
        if t < 0 || !(t as usize).is_multiple_of(self.stride) {
            return None;
        }
        let o = t as usize / self.stride;
        (o < limit).then_some(o)
    }
}

#[inline]
fn axpy<T: Scalar>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &Conv2dGeom) -> Vec<T> {
    let mut y = vec![T::zero(); g.batch * g.oh * g.ow * g.cout];
    let blk = g.cin * g.cout;
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o0 = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                let out = &mut y[o0..o0 + g.cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_coord(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_coord(ox, kx, g.pad_left, g.w) else { continue };
                        let i0 = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let wb = &w[(ky * g.kw + kx) * blk..][..blk];
                        for (ci, &xv) in x[i0..i0 + g.cin].iter().enumerate() {
                            axpy(out, xv, &wb[ci * g.cout..(ci + 1) * g.cout]);
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of [`conv2d_forward`] with respect to its input; also the forward
/// pass of the transposed convolution.
pub fn conv2d_backward_input<T: Scalar>(dy: &[T], w: &[T], g: &Conv2dGeom) -> Vec<T> {
    // kernel re-laid out as [kh,kw,Cout,Cin] so the inner loop is contiguous
    let blk = g.cin * g.cout;
    let mut wt = vec![T::zero(); w.len()];
    for t in 0..g.kh * g.kw {
        for ci in 0..g.cin {
            for co in 0..g.cout {
                wt[t * blk + co * g.cin + ci] = w[t * blk + ci * g.cout + co];
            }
        }
    }
    let mut dx = vec![T::zero(); g.batch * g.h * g.w * g.cin];
    for b in 0..g.batch {
        for iy in 0..g.h {
            for ix in 0..g.w {
                let i0 = ((b * g.h + iy) * g.w + ix) * g.cin;
                let acc = &mut dx[i0..i0 + g.cin];
                for ky in 0..g.kh {
                    let Some(oy) = g.out_coord(iy, ky, g.pad_top, g.oh) else { continue };
                    for kx in 0..g.kw {
                        let Some(ox) = g.out_coord(ix, kx, g.pad_left, g.ow) else { continue };
                        let o0 = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                        let wb = &wt[(ky * g.kw + kx) * blk..][..blk];
                        for (co, &d) in dy[o0..o0 + g.cout].iter().enumerate() {
                            axpy(acc, d, &wb[co * g.cin..(co + 1) * g.cin]);
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_backward_kernel<T: Scalar>(x: &[T], dy: &[T], g: &Conv2dGeom) -> Vec<T> {
    let blk = g.cin * g.cout;
    let mut dw = vec![T::zero(); g.kh * g.kw * blk];
    for b in 0..g.batch {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let o0 = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                let d = &dy[o0..o0 + g.cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_coord(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_coord(ox, kx, g.pad_left, g.w) else { continue };
                        let i0 = ((b * g.h + iy) * g.w + ix) * g.cin;
                        let wb = &mut dw[(ky * g.kw + kx) * blk..][..blk];
                        for (ci, &xv) in x[i0..i0 + g.cin].iter().enumerate() {
                            axpy(&mut wb[ci * g.cout..(ci + 1) * g.cout], xv, d);
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Causal mask flavour for 3D convolutions over raster order (d, h, w).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskType {
    /// Excludes the center tap: strictly causal.
    A,
    /// Keeps the center tap.
    B,
}

/// One unmasked tap of a 3D kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tap {
    pub dd: isize,
    pub dh: isize,
    pub dw: isize,
    /// Flat tap index into the kernel's leading `kd*kh*kw` axes.
    pub index: usize,
}

/// Taps of a `kd x kh x kw` kernel that survive the causal mask, in kernel order.
pub fn causal_taps(kd: usize, kh: usize, kw: usize, mask: MaskType) -> Result<Vec<Tap>> {
    if kd.is_multiple_of(2) || kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("masked conv3d kernel extent must be odd, got {kd}x{kh}x{kw}")));
    }
    let (cd, ch, cw) = ((kd / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
    let mut taps = Vec::new();
    for a in 0..kd {
        for b in 0..kh {
            for c in 0..kw {
                let (dd, dh, dw) = (a as isize - cd, b as isize - ch, c as isize - cw);
                let order = (dd, dh, dw).cmp(&(0, 0, 0));
                let keep = match mask {
                    MaskType::A => order.is_lt(),
                    MaskType::B => order.is_le(),
                };
                if keep {
                    taps.push(Tap { dd, dh, dw, index: (a * kh + b) * kw + c });
                }
            }
        }
    }
    Ok(taps)
}

/// Geometry of a stride-1, same-padded 3D convolution `[B,D,H,W,Cin] -> [B,D,H,W,Cout]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub batch: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3dGeom {
    pub fn new(input: &[usize], kernel: &[usize]) -> Result<Self> {
        if input.len() != 5 || kernel.len() != 5 {
            return Err(Error::shape(
                "conv3d_masked",
                format!("expected input [B,D,H,W,C] and kernel [kd,kh,kw,Cin,Cout], got {input:?} and {kernel:?}"),
            ));
        }
        if input[4] != kernel[3] {
            return Err(Error::shape(
                "conv3d_masked",
                format!("input {input:?} has {} channels but kernel {kernel:?} expects {}", input[4], kernel[3]),
            ));
        }
        Ok(Conv3dGeom { batch: input[0], d: input[1], h: input[2], w: input[3], cin: input[4], cout: kernel[4] })
    }

    #[inline]
    pub fn site(&self, b: usize, d: usize, h: usize, w: usize) -> usize {
        ((b * self.d + d) * self.h + h) * self.w + w
    }

    #[inline]
    fn shift(&self, d: usize, h: usize, w: usize, t: &Tap) -> Option<(usize, usize, usize)> {
        let (a, b, c) = (d as isize + t.dd, h as isize + t.dh, w as isize + t.dw);
        (a >= 0 && b >= 0 && c >= 0 && (a as usize) < self.d && (b as usize) < self.h && (c as usize) < self.w)
            .then_some((a as usize, b as usize, c as usize))
    }
}

/// Output channels at one site. The batched forward and the sequential
/// entropy decoder both go through this routine, which keeps them bitwise equal.
#[inline]
pub fn conv3d_at<T: Scalar>(
    x: &[T],
    w: &[T],
    taps: &[Tap],
    g: &Conv3dGeom,
    (b, d, h, wi): (usize, usize, usize, usize),
    out: &mut [T],
) {
    let blk = g.cin * g.cout;
    out.iter_mut().for_each(|o| *o = T::zero());
    for t in taps {
        let Some((a, bb, c)) = g.shift(d, h, wi, t) else { continue };
        let i0 = g.site(b, a, bb, c) * g.cin;
        let wb = &w[t.index * blk..][..blk];
        for (ci, &xv) in x[i0..i0 + g.cin].iter().enumerate() {
            axpy(out, xv, &wb[ci * g.cout..(ci + 1) * g.cout]);
        }
    }
}

pub fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], taps: &[Tap], g: &Conv3dGeom) -> Vec<T> {
    let mut y = vec![T::zero(); g.batch * g.d * g.h * g.w * g.cout];
    for b in 0..g.batch {
        for d in 0..g.d {
            for h in 0..g.h {
                for wi in 0..g.w {
                    let o0 = g.site(b, d, h, wi) * g.cout;
                    conv3d_at(x, w, taps, g, (b, d, h, wi), &mut y[o0..o0 + g.cout]);
                }
            }
        }
    }
    y
}

pub fn conv3d_backward_input<T: Scalar>(dy: &[T], w: &[T], taps: &[Tap], g: &Conv3dGeom) -> Vec<T> {
    let blk = g.cin * g.cout;
    let mut wt = vec![T::zero(); w.len()];
    for t in taps {
        for ci in 0..g.cin {
            for co in 0..g.cout {
                wt[t.index * blk + co * g.cin + ci] = w[t.index * blk + ci * g.cout + co];
            }
        }
    }
    let mut dx = vec![T::zero(); g.batch * g.d * g.h * g.w * g.cin];
    for b in 0..g.batch {
        for d in 0..g.d {
            for h in 0..g.h {
                for wi in 0..g.w {
                    let i0 = g.site(b, d, h, wi) * g.cin;
                    let acc = &mut dx[i0..i0 + g.cin];
                    for t in taps {
                        // input q feeds output q - offset
                        let inv = Tap { dd: -t.dd, dh: -t.dh, dw: -t.dw, index: t.index };
                        let Some((a, bb, c)) = g.shift(d, h, wi, &inv) else { continue };
                        let o0 = g.site(b, a, bb, c) * g.cout;
                        let wb = &wt[t.index * blk..][..blk];
                        for (co, &dv) in dy[o0..o0 + g.cout].iter().enumerate() {
                            axpy(acc, dv, &wb[co * g.cin..(co + 1) * g.cin]);
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv3d_backward_kernel<T: Scalar>(x: &[T], dy: &[T], taps: &[Tap], g: &Conv3dGeom, kernel_len: usize) -> Vec<T> {
    let blk = g.cin * g.cout;
    let mut dw = vec![T::zero(); kernel_len];
    for b in 0..g.batch {
        for d in 0..g.d {
            for h in 0..g.h {
                for wi in 0..g.w {
                    let o0 = g.site(b, d, h, wi) * g.cout;
                    let dv = &dy[o0..o0 + g.cout];
                    for t in taps {
                        let Some((a, bb, c)) = g.shift(d, h, wi, t) else { continue };
                        let i0 = g.site(b, a, bb, c) * g.cin;
                        let wb = &mut dw[t.index * blk..][..blk];
                        for (ci, &xv) in x[i0..i0 + g.cin].iter().enumerate() {
                            axpy(&mut wb[ci * g.cout..(ci + 1) * g.cout], xv, dv);
                        }
                    }
                }
            }
        }
    }
    dw
}

/// Separable depthwise filter with valid borders: `[B,H,W,C] -> [B,H-k+1,W-k+1,C]`.
pub fn window_filter<T: Scalar>(x: &[T], shape: &[usize], taps: &[T]) -> Vec<T> {
    let (bn, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    // rows first
    let mut tmp = vec![T::zero(); bn * oh * w * c];
    for b in 0..bn {
        for y in 0..oh {
            for xx in 0..w {
                let o0 = ((b * oh + y) * w + xx) * c;
                for (u, &g) in taps.iter().enumerate() {
                    let i0 = ((b * h + y + u) * w + xx) * c;
                    axpy(&mut tmp[o0..o0 + c], g, &x[i0..i0 + c]);
                }
            }
        }
    }
    let mut out = vec![T::zero(); bn * oh * ow * c];
    for b in 0..bn {
        for y in 0..oh {
            for xx in 0..ow {
                let o0 = ((b * oh + y) * ow + xx) * c;
                for (v, &g) in taps.iter().enumerate() {
                    let i0 = ((b * oh + y) * w + xx + v) * c;
                    axpy(&mut out[o0..o0 + c], g, &tmp[i0..i0 + c]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`window_filter`].
pub fn window_filter_backward<T: Scalar>(dy: &[T], shape: &[usize], taps: &[T]) -> Vec<T> {
    let (bn, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); bn * oh * w * c];
    for b in 0..bn {
        for y in 0..oh {
            for xx in 0..ow {
                let o0 = ((b * oh + y) * ow + xx) * c;
                for (v, &g) in taps.iter().enumerate() {
                    let i0 = ((b * oh + y) * w + xx + v) * c;
                    axpy(&mut tmp[i0..i0 + c], g, &dy[o0..o0 + c]);
                }
            }
        }
    }
    let mut dx = vec![T::zero(); bn * h * w * c];
    for b in 0..bn {
        for y in 0..oh {
            for xx in 0..w {
                let o0 = ((b * oh + y) * w + xx) * c;
                for (u, &g) in taps.iter().enumerate() {
                    let i0 = ((b * h + y + u) * w + xx) * c;
                    axpy(&mut dx[i0..i0 + c], g, &tmp[o0..o0 + c]);
                }
            }
        }
    }
    dx
}

/// 2x2 average pooling, floor semantics on odd sizes.
pub fn avg_pool2<T: Scalar>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (bn, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); bn * oh * ow * c];
    for b in 0..bn {
        for y in 0..oh {
            for xx in 0..ow {
                let o0 = ((b * oh + y) * ow + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i0 = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    axpy(&mut out[o0..o0 + c], quarter, &x[i0..i0 + c]);
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(dy: &[T], shape: &[usize]) -> Vec<T> {
    let (bn, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); bn * h * w * c];
    for b in 0..bn {
        for y in 0..oh {
            for xx in 0..ow {
                let o0 = ((b * oh + y) * ow + xx) * c;
                for (ddy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i0 = ((b * h + 2 * y + ddy) * w + 2 * xx + ddx) * c;
                    axpy(&mut dx[i0..i0 + c], quarter, &dy[o0..o0 + c]);
                }
            }
        }
    }
    dx
}

/// Numerically stable softmax of one row.
pub fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        s = s + *o;
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_output_sizes() {
        let g = Conv2dGeom::new(&[1, 8, 8, 2], &[5, 5, 2, 3], 2, 1, Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow), (4, 4));
        let g = Conv2dGeom::new(&[1, 7, 9, 2], &[3, 3, 2, 3], 2, 1, Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow), (4, 5));
        let g = Conv2dGeom::new(&[1, 16, 16, 1], &[3, 3, 1, 1], 4, 1, Padding::Same).unwrap();
        assert_eq!((g.oh, g.ow), (4, 4));
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let err = Conv2dGeom::new(&[1, 8, 8, 2], &[3, 3, 4, 1], 1, 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 8, 8, 2]") && msg.contains("[3, 3, 4, 1]"), "{msg}");
    }

    #[test]
    fn even_kernels_rejected() {
        assert!(Conv2dGeom::new(&[1, 8, 8, 1], &[2, 2, 1, 1], 1, 1, Padding::Same).is_err());
        assert!(causal_taps(3, 2, 3, MaskType::A).is_err());
    }

    #[test]
    fn mask_tap_counts() {
        // 27 taps, 13 strictly before the center
        assert_eq!(causal_taps(3, 3, 3, MaskType::A).unwrap().len(), 13);
        assert_eq!(causal_taps(3, 3, 3, MaskType::B).unwrap().len(), 14);
    }

    #[test]
    fn window_filter_of_constant_is_constant() {
        let taps = [0.25f64, 0.5, 0.25];
        let x = vec![2.0; 5 * 5];
        let y = window_filter(&x, &[1, 5, 5, 1], &taps);
        assert_eq!(y.len(), 9);
        assert!(y.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }
}
