//! Distortion and regularisation terms of the training objective, plus the
//! structural-similarity family used both as loss and as evaluation metric.

use crate::diff::{Graph, ParamId, ParamKind, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SCALES: usize = 5;

/// Relative pixel count of each scale; normalised these give the MR weights.
pub const MR_SCALE_SIZES: [f64; SCALES] = [256.0, 64.0, 16.0, 4.0, 1.0];

/// Perception-calibrated MS-SSIM weights as published (they sum to 1.0001).
pub const MS_WEIGHTS: [f64; SCALES] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Floor applied to per-scale terms before the fractional power.
const POW_FLOOR: f64 = 1e-6;

pub fn mr_weights() -> [f64; SCALES] {
    let total: f64 = MR_SCALE_SIZES.iter().sum();
    MR_SCALE_SIZES.map(|s| s / total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SsimPreset {
    /// Weights proportional to each scale's pixel count.
    Mr,
    Ms,
}

impl SsimPreset {
    pub fn weights(self) -> [f64; SCALES] {
        match self {
            SsimPreset::Mr => mr_weights(),
            SsimPreset::Ms => {
                let s: f64 = MS_WEIGHTS.iter().sum();
                MS_WEIGHTS.map(|w| w / s)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SsimPreset::Mr => "mr",
            SsimPreset::Ms => "ms",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mr" => Ok(SsimPreset::Mr),
            "ms" => Ok(SsimPreset::Ms),
            other => Err(Error::Config(format!("unknown ssim preset `{other}` (expected mr|ms)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsimConfig {
    pub weights: [f64; SCALES],
    pub window: usize,
    pub window_std: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SsimConfig {
    pub fn new(preset: SsimPreset, window: usize) -> Result<Self> {
        let cfg = SsimConfig { weights: preset.weights(), window, window_std: 1.5, c1: 0.01 * 0.01, c2: 0.03 * 0.03 };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 11-tap window for crops of at least 176 pixels, otherwise 3 taps so
    /// that the coarsest scale still holds a full window.
    pub fn for_crop(preset: SsimPreset, crop: usize) -> Result<Self> {
        Self::new(preset, if crop / 16 >= 11 { 11 } else { 3 })
    }

    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-6 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config(format!(
                "scale weights must be nonnegative and sum to 1, got {:?}",
                self.weights
            )));
        }
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("ssim window must be odd and >= 3, got {}", self.window)));
        }
        Ok(())
    }

    /// Normalised 1D Gaussian taps.
    pub fn taps<T: Scalar>(&self) -> Vec<T> {
        let c = (self.window / 2) as f64;
        let raw: Vec<f64> =
            (0..self.window).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.window_std.powi(2))).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| T::of(v / s)).collect()
    }

    /// Smallest side length accepted by the five-scale metric.
    pub fn min_size(&self) -> usize {
        self.window << (SCALES - 1)
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::shape("ms_ssim", format!("expected [B,H,W,C], got {shape:?}")));
        }
        if (shape[1] >> (SCALES - 1)) < self.window || (shape[2] >> (SCALES - 1)) < self.window {
            let m = self.min_size();
            return Err(Error::InvalidArgument(format!(
                "image {}x{} too small for {SCALES}-scale similarity with window {}: need at least {m}x{m}",
                shape[1], shape[2], self.window
            )));
        }
        Ok(())
    }
}

struct ScaleMaps {
    luminance: Var,
    contrast_structure: Var,
}

fn scale_maps<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, taps: &[T], cfg: &SsimConfig) -> Result<ScaleMaps> {
    let c1 = T::of(cfg.c1);
    let c2 = T::of(cfg.c2);
    let two = T::of(2.0);
    let mx = g.windowed_mean(x, taps)?;
    let my = g.windowed_mean(y, taps)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = g.window_filter(xx, taps)?;
    let eyy = g.window_filter(yy, taps)?;
    let exy = g.window_filter(xy, taps)?;
    let mxx = g.mul(mx, mx)?;
    let myy = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mxx)?;
    let vy = g.sub(eyy, myy)?;
    let cov = g.sub(exy, mxy)?;

    let ln = g.scale(mxy, two);
    let ln = g.add_scalar(ln, c1);
    let ld = g.add(mxx, myy)?;
    let ld = g.add_scalar(ld, c1);
    let luminance = g.div(ln, ld)?;

    let cn = g.scale(cov, two);
    let cn = g.add_scalar(cn, c2);
    let cd = g.add(vx, vy)?;
    let cd = g.add_scalar(cd, c2);
    let contrast_structure = g.div(cn, cd)?;
    Ok(ScaleMaps { luminance, contrast_structure })
}

/// Five-scale similarity of each batch item, `[B,H,W,C] x2 -> [B]`.
///
/// Luminance enters only at the coarsest scale, contrast-structure at every
/// scale; each map is averaged over space and channels before weighting.
pub fn ms_ssim_items<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::shape("ms_ssim", format!("{:?} vs {:?}", g.shape(x), g.shape(y))));
    }
    cfg.check(g.shape(x))?;
    let taps = cfg.taps::<T>();
    let floor = T::of(POW_FLOOR);
    let (mut xs, mut ys) = (x, y);
    let mut acc: Option<Var> = None;
    for (i, &w) in cfg.weights.iter().enumerate() {
        if i > 0 {
            xs = g.avg_pool2(xs)?;
            ys = g.avg_pool2(ys)?;
        }
        let maps = scale_maps(g, xs, ys, &taps, cfg)?;
        let cs = g.mean_per_item(maps.contrast_structure);
        let mut term = g.pow_clamped(cs, T::of(w), floor);
        if i == SCALES - 1 {
            let l = g.mean_per_item(maps.luminance);
            let l = g.pow_clamped(l, T::of(w), floor);
            term = g.mul(term, l)?;
        }
        acc = Some(match acc {
            None => term,
            Some(a) => g.mul(a, term)?,
        });
    }
    Ok(acc.expect("five scales"))
}

/// Batch-mean five-scale similarity (the `f_s` of the objective).
pub fn ms_ssim<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    let items = ms_ssim_items(g, x, y, cfg)?;
    Ok(g.mean(items))
}

/// Single-scale SSIM per batch item (mean of the full SSIM map).
pub fn ssim_items<T: Scalar>(g: &mut Graph<T>, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(Error::shape("ssim", format!("{:?} vs {:?}", g.shape(x), g.shape(y))));
    }
    let taps = cfg.taps::<T>();
    let maps = scale_maps(g, x, y, &taps, cfg)?;
    let m = g.mul(maps.luminance, maps.contrast_structure)?;
    Ok(g.mean_per_item(m))
}

/// Per-item values of a metric evaluated on plain tensors.
fn eval_items<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    f: impl Fn(&mut Graph<T>, Var, Var) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (a, b) = (g.input(x.clone()), g.input(y.clone()));
    let v = f(&mut g, a, b)?;
    Ok(g.value(v).data().iter().map(|v| v.f64()).collect())
}

pub fn ms_ssim_values<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<Vec<f64>> {
    eval_items(x, y, |g, a, b| ms_ssim_items(g, a, b, cfg))
}

pub fn ssim_values<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<Vec<f64>> {
    eval_items(x, y, |g, a, b| ssim_items(g, a, b, cfg))
}

/// Mean absolute error of both side reconstructions plus `psi` times that of
/// the central one, averaged over pixels, channels and batch.
pub fn recon_l1<T: Scalar>(g: &mut Graph<T>, x: Var, ya: Var, yb: Var, y: Var, psi: T) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    for r in [ya, yb, y] {
        if g.shape(r) != g.shape(x) {
            return Err(Error::shape("recon_l1", format!("{:?} vs {:?}", g.shape(x), g.shape(r))));
        }
        let d = g.sub(x, r)?;
        let a = g.abs(d);
        terms.push(g.mean(a));
    }
    let sides = g.add(terms[0], terms[1])?;
    let central = g.scale(terms[2], psi);
    g.add(sides, central)
}

/// Negated sum of the similarities of the three reconstructions to `x`.
pub fn dissim_d2<T: Scalar>(g: &mut Graph<T>, x: Var, ya: Var, yb: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    let a = ms_ssim(g, x, ya, cfg)?;
    let b = ms_ssim(g, x, yb, cfg)?;
    let c = ms_ssim(g, x, y, cfg)?;
    let s = g.add(a, b)?;
    let s = g.add(s, c)?;
    Ok(g.scale(s, -T::one()))
}

/// Similarity between the two side reconstructions; minimised to keep the
/// descriptions diverse.
pub fn md_distance<T: Scalar>(g: &mut Graph<T>, ya: Var, yb: Var, cfg: &SsimConfig) -> Result<Var> {
    ms_ssim(g, ya, yb, cfg)
}

/// Sum of squared convolution-kernel entries (biases and centers excluded).
pub fn weight_l2<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var> {
    let ids: Vec<ParamId> = store.trainable().filter(|(_, p)| p.kind == ParamKind::Kernel).map(|(id, _)| id).collect();
    let mut acc: Option<Var> = None;
    for id in ids {
        let w = g.param(store, id);
        let sq = g.mul(w, w)?;
        let s = g.sum(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(match acc {
        Some(v) => v,
        None => g.input(Tensor::scalar(T::zero())),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the side-to-side similarity term.
    pub alpha: f64,
    /// Weight of the kernel penalty.
    pub beta: f64,
    /// Weight of the rate terms.
    pub gamma: f64,
    /// Weight of the central reconstruction inside the L1 term.
    pub psi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.1, beta: 2e-4, gamma: 0.1, psi: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.psi];
        if all.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

/// Every term of the objective for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Estimated bits per symbol of description A.
    pub rate_a: f64,
    pub rate_b: f64,
    pub d1: f64,
    pub d2: f64,
    pub dd: f64,
    pub dr: f64,
    pub total: f64,
}

impl LossReport {
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        w.gamma * (self.rate_a + self.rate_b) + (self.d1 + self.d2 + w.beta * self.dr) + w.alpha * self.dd
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("rate_a", self.rate_a),
            ("rate_b", self.rate_b),
            ("d1", self.d1),
            ("d2", self.d2),
            ("dd", self.dd),
            ("dr", self.dr),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Graph nodes of every objective term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rate_a: Var,
    pub rate_b: Var,
    pub d1: Var,
    pub d2: Var,
    pub dd: Var,
    pub dr: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> LossReport {
        let v = |x: Var| g.scalar(x).f64();
        LossReport {
            rate_a: v(self.rate_a),
            rate_b: v(self.rate_b),
            d1: v(self.d1),
            d2: v(self.d2),
            dd: v(self.dd),
            dr: v(self.dr),
            total: v(self.total),
        }
    }
}

/// Reconstructions entering the objective.
#[derive(Clone, Copy, Debug)]
pub struct Reconstructions {
    pub side_a: Var,
    pub side_b: Var,
    pub central: Var,
}

/// `gamma (Ra + Rb) + [D1 + D2 + beta Dr] + alpha Dd`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    rates: (Var, Var),
    x: Var,
    rec: Reconstructions,
    store: &ParamStore<T>,
    w: &LossWeights,
    cfg: &SsimConfig,
) -> Result<LossTerms> {
    let Reconstructions { side_a, side_b, central } = rec;
    let d1 = recon_l1(g, x, side_a, side_b, central, T::of(w.psi))?;
    let d2 = dissim_d2(g, x, side_a, side_b, central, cfg)?;
    let dd = md_distance(g, side_a, side_b, cfg)?;
    let dr = weight_l2(g, store)?;

    let r = g.add(rates.0, rates.1)?;
    let r = g.scale(r, T::of(w.gamma));
    let dist = g.add(d1, d2)?;
    let reg = g.scale(dr, T::of(w.beta));
    let dist = g.add(dist, reg)?;
    let div = g.scale(dd, T::of(w.alpha));
    let total = g.add(r, dist)?;
    let total = g.add(total, div)?;
    Ok(LossTerms { rate_a: rates.0, rate_b: rates.1, d1, d2, dd, dr, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, h: usize, w: usize, c: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[1, h, w, c], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn mr_weights_match_published_rounding() {
        let w = mr_weights();
        let published = [0.750, 0.188, 0.047, 0.012, 0.003];
        let precise = [0.7507, 0.1877, 0.0469, 0.0117, 0.0029];
        for i in 0..SCALES {
            assert!((w[i] - published[i]).abs() <= 1e-3, "{w:?}");
            assert!((w[i] - precise[i]).abs() <= 1e-4, "{w:?}");
        }
    }

    #[test]
    fn ms_preset_keeps_published_ratios() {
        let w = SsimPreset::Ms.weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in w.iter().zip(MS_WEIGHTS) {
            assert!((a - b).abs() < 5e-5);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SsimConfig::new(SsimPreset::Mr, 4).is_err());
        assert!(SsimConfig::new(SsimPreset::Mr, 1).is_err());
        let mut c = SsimConfig::new(SsimPreset::Mr, 3).unwrap();
        c.weights[0] += 0.1;
        assert!(c.validate().is_err());
        assert_eq!(SsimConfig::for_crop(SsimPreset::Mr, 64).unwrap().window, 3);
        assert_eq!(SsimConfig::for_crop(SsimPreset::Mr, 176).unwrap().window, 11);
    }

    #[test]
    fn too_small_image_rejected_with_minimum() {
        let cfg = SsimConfig::new(SsimPreset::Mr, 3).unwrap();
        let x = img(1, 40, 48, 1);
        let err = ms_ssim_values(&x, &x, &cfg).unwrap_err();
        assert!(err.to_string().contains("48x48"), "{err}");
    }

    #[test]
    fn identical_images_score_one() {
        let cfg = SsimConfig::new(SsimPreset::Mr, 3).unwrap();
        let x = img(3, 64, 64, 3);
        let v = ms_ssim_values(&x, &x, &cfg).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 8, 8, 1]));
        let ones = g.input(Tensor::ones(&[1, 8, 8, 1]));
        let d = recon_l1(&mut g, x, ones, ones, ones, 1.0).unwrap();
        assert_eq!(g.scalar(d), 3.0);
        let d2 = recon_l1(&mut g, x, ones, ones, ones, 2.0).unwrap();
        assert_eq!(g.scalar(d2) - g.scalar(d), 1.0);
        let z = recon_l1(&mut g, x, x, x, x, 1.0).unwrap();
        assert_eq!(g.scalar(z), 0.0);
    }

    #[test]
    fn d2_and_distance_identities() {
        let cfg = SsimConfig::new(SsimPreset::Mr, 3).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.input(img(5, 48, 48, 3));
        let d2 = dissim_d2(&mut g, x, x, x, x, &cfg).unwrap();
        assert!((g.scalar(d2) + 3.0).abs() < 1e-12);
        let dd = md_distance(&mut g, x, x, &cfg).unwrap();
        assert!((g.scalar(dd) - 1.0).abs() < 1e-12);
        let n1 = g.input(img(6, 48, 48, 3));
        let n2 = g.input(img(7, 48, 48, 3));
        let dn = md_distance(&mut g, n1, n2, &cfg).unwrap();
        assert!(g.scalar(dn) < 0.5, "{}", g.scalar(dn));
    }

    #[test]
    fn weight_penalty_examples() {
        let mut s = ParamStore::<f64>::new();
        s.register("k", Tensor::ones(&[3, 3, 1, 1]), ParamKind::Kernel).unwrap();
        s.register("b", Tensor::ones(&[4]), ParamKind::Bias).unwrap();
        let mut g = Graph::new();
        let v = weight_l2(&mut g, &s).unwrap();
        assert_eq!(g.scalar(v), 9.0);
        s.get_mut(ParamId(0)).tensor = Tensor::full(&[3, 3, 1, 1], 2.0);
        let mut g = Graph::new();
        let v = weight_l2(&mut g, &s).unwrap();
        assert_eq!(g.scalar(v), 36.0);
        s.get_mut(ParamId(0)).tensor = Tensor::zeros(&[3, 3, 1, 1]);
        let mut g = Graph::new();
        let v = weight_l2(&mut g, &s).unwrap();
        assert_eq!(g.scalar(v), 0.0);
    }

    #[test]
    fn total_loss_composition() {
        let cfg = SsimConfig::new(SsimPreset::Mr, 3).unwrap();
        let mut store = ParamStore::<f64>::new();
        store.register("k", Tensor::zeros(&[3, 3, 1, 1]), ParamKind::Kernel).unwrap();
        let mut g = Graph::new();
        let x = g.input(img(9, 48, 48, 3));
        let r0 = g.input(Tensor::scalar(0.0));
        let w = LossWeights::default();
        let rec = Reconstructions { side_a: x, side_b: x, central: x };
        let t = total_loss(&mut g, (r0, r0), x, rec, &store, &w, &cfg).unwrap();
        assert!((g.scalar(t.total) + 2.9).abs() < 1e-12);
        let rep = t.report(&g);
        assert!((rep.recompose(&w) - rep.total).abs() < 1e-12);

        let w0 = LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0, psi: 1.0 };
        let y = g.input(img(10, 48, 48, 3));
        let ra = g.input(Tensor::scalar(2.5));
        let rec = Reconstructions { side_a: y, side_b: x, central: y };
        let t = total_loss(&mut g, (ra, ra), x, rec, &store, &w0, &cfg).unwrap();
        let rep = t.report(&g);
        assert!((rep.total - (rep.d1 + rep.d2)).abs() < 1e-12);
    }
}
