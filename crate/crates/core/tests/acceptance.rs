//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use image::RgbImage;
use mdq_core::diff::{
    finite_diff_check, finite_diff_check_params, FdOptions, Graph, MaskType, Padding, ParamStore, Var,
};
use mdq_core::entroc::{
    ac_decode, ac_encode, decode_container, encode_container, ideal_bits, quantize_probs, MdqContainer,
    ProbabilitySource, FLUSH_BYTES,
};
use mdq_core::losses::{mr_weights, ms_ssim_values, ssim_values, LossWeights, SsimConfig, SsimPreset};
use mdq_core::networks::{CodecModel, NetConfig, QuantMode};
use mdq_core::quant::{hard_quantize, soft_quantize, Side, SymbolTensor};
use mdq_core::trainer::{channel_outcomes, code_image, evaluate, objective, Corpus, Outcome, TrainConfig, Trainer};
use mdq_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, &mut rng(seed))
}

fn quantizer_convergence() -> Check {
    let t = Instant::now();
    let c = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mids = [-0.75, -0.25, 0.25, 0.75];
    let n = 10_000;
    let (mut worst, mut used) = (0.0f64, 0);
    for i in 0..n {
        let z = -1.25 + 2.5 * i as f64 / (n - 1) as f64;
        if mids.iter().any(|m| (z - m).abs() < 1e-3) {
            continue;
        }
        used += 1;
        worst = worst.max((soft_quantize(z, &c, 1e4) - hard_quantize(z, &c).1).abs());
    }
    let dt = t.elapsed();
    ensure(
        worst < 1e-3 && dt < Duration::from_secs(1),
        format!("max |soft - hard| = {worst:.2e} over {used} points in {:.3} s", dt.as_secs_f64()),
    )
}

fn mr_weight_oracle() -> Check {
    let want = [0.750, 0.188, 0.047, 0.012, 0.003];
    let got = mr_weights();
    let dev = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    ensure(dev <= 1e-3, format!("weights {got:.4?}, max deviation {dev:.1e}"))
}

fn ssim_identities() -> Check {
    let x = rand(&[100, 64, 64, 3], 0.0, 1.0, 31);
    let y = rand(&[100, 64, 64, 3], 0.0, 1.0, 32);
    let (mut id_dev, mut sym_dev) = (0.0f64, 0.0f64);
    for preset in [SsimPreset::Ms, SsimPreset::Mr] {
        let cfg = SsimConfig::for_crop(preset, 64).map_err(|e| e.to_string())?;
        let f = |a: &Tensor<f64>, b: &Tensor<f64>| -> Result<Vec<f64>> {
            let mut v = ms_ssim_values(a, b, &cfg)?;
            v.extend(ssim_values(a, b, &cfg)?);
            Ok(v)
        };
        let same = f(&x, &x).map_err(|e| e.to_string())?;
        let xy = f(&x, &y).map_err(|e| e.to_string())?;
        let yx = f(&y, &x).map_err(|e| e.to_string())?;
        id_dev = same.iter().map(|v| (v - 1.0).abs()).fold(id_dev, f64::max);
        sym_dev = xy.iter().zip(&yx).map(|(a, b)| (a - b).abs()).fold(sym_dev, f64::max);
    }
    ensure(
        id_dev <= 1e-6 && sym_dev <= 1e-9,
        format!("identity deviation {id_dev:.1e}, asymmetry {sym_dev:.1e} over 100 images, both presets"),
    )
}

/// Contracts an op output with a fixed random tensor.
fn probe(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let r = g.input(rand(g.shape(y), -1.0, 1.0, 99));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn signed(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let v = r.gen_range(0.1..1.0);
        if r.gen::<bool>() {
            v
        } else {
            -v
        }
    })
}

fn op_cases() -> Vec<(String, Vec<Tensor<f64>>, OpFn)> {
    let mut v: Vec<(String, Vec<Tensor<f64>>, OpFn)> = Vec::new();
    for (s, d, p) in [
        (1, 1, Padding::Same),
        (2, 1, Padding::Same),
        (4, 1, Padding::Same),
        (1, 2, Padding::Same),
        (1, 4, Padding::Same),
        (1, 1, Padding::Valid),
    ] {
        let ins = vec![rand(&[2, 8, 8, 3], -1.0, 1.0, 1), rand(&[3, 3, 3, 4], -0.5, 0.5, 2)];
        v.push((format!("conv2d s{s} d{d} {p:?}"), ins, Box::new(move |g, x| g.conv2d(x[0], x[1], s, d, p))));
    }
    for s in [2, 4] {
        let ins = vec![rand(&[2, 3, 3, 2], -1.0, 1.0, 5), rand(&[5, 5, 3, 2], -0.5, 0.5, 6)];
        v.push((format!("conv_transpose2d s{s}"), ins, Box::new(move |g, x| g.conv_transpose2d(x[0], x[1], s))));
    }
    for mask in [MaskType::A, MaskType::B] {
        let ins = vec![rand(&[2, 3, 4, 4, 2], -1.0, 1.0, 7), rand(&[3, 3, 3, 2, 3], -0.5, 0.5, 8)];
        v.push((format!("conv3d {mask:?}"), ins, Box::new(move |g, x| g.conv3d_masked(x[0], x[1], mask))));
    }
    let a = rand(&[2, 3, 3, 2], -1.0, 1.0, 10);
    let b = rand(&[2, 3, 3, 2], 0.5, 1.5, 11);
    v.push(("add".into(), vec![a.clone(), b.clone()], Box::new(|g, x| g.add(x[0], x[1]))));
    v.push(("sub".into(), vec![a.clone(), b.clone()], Box::new(|g, x| g.sub(x[0], x[1]))));
    v.push(("mul".into(), vec![a.clone(), b.clone()], Box::new(|g, x| g.mul(x[0], x[1]))));
    v.push(("div".into(), vec![a.clone(), b], Box::new(|g, x| g.div(x[0], x[1]))));
    v.push(("add_bias".into(), vec![a, rand(&[2], -1.0, 1.0, 12)], Box::new(|g, x| g.add_bias(x[0], x[1]))));
    let s = signed(&[2, 4, 4, 3], 13);
    let pos = rand(&[2, 4, 4, 3], 0.05, 1.0, 14);
    let unary: Vec<(&str, OpFn)> = vec![
        ("scale", Box::new(|g, x| Ok(g.scale(x[0], 0.7)))),
        ("add_scalar", Box::new(|g, x| Ok(g.add_scalar(x[0], 0.3)))),
        ("relu", Box::new(|g, x| Ok(g.relu(x[0])))),
        ("leaky_relu", Box::new(|g, x| Ok(g.leaky_relu(x[0], 0.2)))),
        ("sigmoid", Box::new(|g, x| Ok(g.sigmoid(x[0])))),
        ("tanh", Box::new(|g, x| Ok(g.tanh(x[0])))),
        ("abs", Box::new(|g, x| Ok(g.abs(x[0])))),
        ("clamp", Box::new(|g, x| Ok(g.clamp(x[0], -0.55, 0.45)))),
    ];
    for (name, f) in unary {
        v.push((name.into(), vec![s.clone()], f));
    }
    v.push(("pow_clamped".into(), vec![pos.clone()], Box::new(|g, x| Ok(g.pow_clamped(x[0], 0.75, 1e-6)))));
    v.push(("ln_floor".into(), vec![pos], Box::new(|g, x| Ok(g.ln_floor(x[0], 1e-9)))));
    let x = rand(&[2, 4, 4, 3], -1.0, 1.0, 15);
    let y = rand(&[2, 4, 4, 2], -1.0, 1.0, 16);
    v.push(("sum".into(), vec![x.clone()], Box::new(|g, x| Ok(g.sum(x[0])))));
    v.push(("mean".into(), vec![x.clone()], Box::new(|g, x| Ok(g.mean(x[0])))));
    v.push(("mean_per_item".into(), vec![x.clone()], Box::new(|g, x| Ok(g.mean_per_item(x[0])))));
    v.push(("softmax".into(), vec![x.clone()], Box::new(|g, x| Ok(g.softmax(x[0])))));
    v.push(("concat".into(), vec![x.clone(), y], Box::new(|g, x| g.concat(&[x[0], x[1]]))));
    v.push(("avg_pool2".into(), vec![x.clone()], Box::new(|g, x| g.avg_pool2(x[0]))));
    v.push(("to_depth".into(), vec![x.clone()], Box::new(|g, x| g.to_depth(x[0]))));
    let idx: Vec<usize> = (0..32).map(|i| (i * 7) % 3).collect();
    v.push(("gather".into(), vec![x], Box::new(move |g, x| g.gather(x[0], idx.clone()))));
    let taps = [0.25, 0.5, 0.25];
    let p = rand(&[2, 6, 6, 3], 0.0, 1.0, 17);
    let q = rand(&[2, 6, 6, 3], 0.0, 1.0, 18);
    v.push(("window_filter".into(), vec![p.clone()], Box::new(move |g, x| g.window_filter(x[0], &taps))));
    v.push(("windowed_mean".into(), vec![p.clone()], Box::new(move |g, x| g.windowed_mean(x[0], &taps))));
    v.push(("windowed_variance".into(), vec![p.clone()], Box::new(move |g, x| g.windowed_variance(x[0], &taps))));
    v.push(("windowed_covariance".into(), vec![p, q], Box::new(move |g, x| g.windowed_covariance(x[0], x[1], &taps))));
    let z = rand(&[1, 3, 3, 4], -1.2, 1.2, 19);
    let c = Tensor::new(vec![5], vec![-1.0, -0.45, 0.05, 0.5, 1.1]).unwrap();
    for sigma in [1.0, 4.0] {
        v.push((
            format!("soft_quantize sigma {sigma}"),
            vec![z.clone(), c.clone()],
            Box::new(move |g, x| Ok(g.soft_quantize(x[0], x[1], sigma))),
        ));
    }
    let d = Tensor::new(vec![1, 2, 2, 1], vec![0.05, 0.3, 0.55, 0.8]).unwrap();
    v.push(("expand_importance".into(), vec![d], Box::new(|g, x| g.expand_importance(x[0], 4))));
    v
}

fn full_pipeline_error(mode: QuantMode, only: Option<&[&str]>, seed: u64) -> Result<f64> {
    let model = CodecModel::<f64>::new(NetConfig::default(), seed)?;
    let x = rand(&[2, 64, 64, 3], 0.0, 1.0, seed + 100);
    let ssim = SsimConfig::new(SsimPreset::Mr, 3)?;
    let w = LossWeights::default();
    let mut store = model.store.clone();
    if let Some(prefixes) = only {
        for (id, p) in model.store.iter() {
            if !prefixes.iter().any(|pre| p.id.starts_with(pre)) {
                store.get_mut(id).trainable = false;
            }
        }
    }
    let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let mut m = model.clone();
        m.store = s.clone();
        let xv = g.input(x.clone());
        Ok(objective(&m, g, xv, 1.0, mode, &w, &ssim)?.total)
    };
    let opts = FdOptions { epsilon: 1e-6, samples: Some(50), seed: 11 };
    Ok(finite_diff_check_params(&store, f, &opts)?.max_rel_err)
}

fn gradient_suite() -> Check {
    let t = Instant::now();
    let opts = FdOptions { epsilon: 1e-6, samples: Some(60), seed: 5 };
    let cases = op_cases();
    let (mut worst, mut worst_op) = (0.0f64, String::new());
    for (name, inputs, f) in &cases {
        let rep = finite_diff_check(|g, v| f(g, v).and_then(|y| probe(g, y)), inputs, &opts)
            .map_err(|e| format!("{name}: {e}"))?;
        if rep.max_rel_err >= worst {
            worst = rep.max_rel_err;
            worst_op = name.clone();
        }
    }
    // finite differences see through a gradient stop, so check it exactly
    let sg = {
        let mut g = Graph::new();
        let x = g.input(rand(&[5], -1.0, 1.0, 21));
        let s = g.stop_gradient(x);
        let y = g.mul(s, x).map_err(|e| e.to_string())?;
        let out = g.sum(y);
        g.backward(out).wrt(x).cloned() == Some(g.value(x).clone())
    };
    let soft = full_pipeline_error(QuantMode::Soft, None, 3).map_err(|e| e.to_string())?;
    let st = full_pipeline_error(QuantMode::StraightThrough, Some(&["dec_", "ent_"]), 4).map_err(|e| e.to_string())?;
    let dt = t.elapsed();
    ensure(
        worst < 1e-3 && sg && soft < 1e-2 && st < 1e-2 && dt < Duration::from_secs(300),
        format!(
            "{} ops worst {worst:.1e} ({worst_op}); stop_gradient exact: {sg}; full objective soft {soft:.1e}, straight-through behind quantizer {st:.1e}; {:.0} s",
            cases.len(),
            dt.as_secs_f64()
        ),
    )
}

fn straight_through_contract() -> Check {
    let z = rand(&[2, 6, 6, 4], -1.5, 1.5, 40);
    let c = Tensor::new(vec![6], vec![-1.0, -0.6, -0.1, 0.3, 0.7, 1.2]).unwrap();
    let run = |st: bool| {
        let mut g = Graph::new();
        let (zv, cv) = (g.input(z.clone()), g.input(c.clone()));
        let q = if st { g.straight_through(zv, cv, 2.0).0 } else { g.soft_quantize(zv, cv, 2.0) };
        let values = g.value(q).clone();
        let out = probe(&mut g, q).unwrap();
        let gr = g.backward(out);
        (values, gr.wrt(zv).unwrap().clone(), gr.wrt(cv).unwrap().clone())
    };
    let (hard, gz_st, gc_st) = run(true);
    let (_, gz_soft, gc_soft) = run(false);
    let members = hard.data().iter().all(|v| c.data().contains(v));
    let same = gz_st == gz_soft && gc_st == gc_soft;
    ensure(
        members && same,
        format!("forward values are centers: {members}; backward identical to soft backward: {same}"),
    )
}

fn importance_expansion() -> Check {
    let expand = |d: f64, k: usize| -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.input(Tensor::new(vec![1, 1, 1, 1], vec![d]).unwrap());
        let e = g.expand_importance(v, k).unwrap();
        g.value(e).data().to_vec()
    };
    let table =
        expand(0.0, 4) == vec![0.0; 4] && expand(1.0, 4) == vec![1.0; 4] && expand(0.5, 4) == vec![1.0, 1.0, 0.0, 0.0];
    let mut r = rng(41);
    let mut violations = 0;
    for _ in 0..1000 {
        let k = r.gen_range(1..=16);
        let (a, b): (f64, f64) = (r.gen(), r.gen());
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if expand(lo, k).iter().zip(expand(hi, k)).any(|(x, y)| *x > y) {
            violations += 1;
        }
    }
    ensure(
        table && violations == 0,
        format!("table matches: {table}; monotonicity violations in 1000 pairs: {violations}"),
    )
}

/// Source whose table depends on position and previous symbol.
struct Adaptive {
    levels: usize,
    seed: u64,
    pos: u64,
    prev: usize,
    sharpness: f64,
}

impl Adaptive {
    fn new(levels: usize, seed: u64, sharpness: f64) -> Self {
        Adaptive { levels, seed, pos: 0, prev: 0, sharpness }
    }
}

impl ProbabilitySource for Adaptive {
    fn levels(&self) -> usize {
        self.levels
    }

    fn next_freqs(&mut self, out: &mut [u32]) -> Result<()> {
        let mut r = rng(self.seed ^ (self.pos << 8) ^ self.prev as u64);
        let w: Vec<f64> = (0..self.levels).map(|_| (r.gen::<f64>() * self.sharpness).exp()).collect();
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / s).collect();
        quantize_probs(&p, out)
    }

    fn push(&mut self, symbol: usize) -> Result<()> {
        self.prev = symbol;
        self.pos += 1;
        Ok(())
    }
}

fn decode_both(m: &CodecModel<f32>, bytes: &[u8]) -> Result<(Option<SymbolTensor>, Option<SymbolTensor>)> {
    let c = MdqContainer::unpack(bytes)?;
    Ok((decode_container(m, &c, Side::A)?, decode_container(m, &c, Side::B)?))
}

fn arithmetic_coding() -> Check {
    let mut r = rng(50);
    let mut mismatches = 0;
    for case in 0..1000u64 {
        let cfg = NetConfig {
            base_channels: 8,
            latent_channels: r.gen_range(1..=4),
            levels: r.gen_range(2..=8),
            resconv_repeats: 1,
            entropy_channels: r.gen_range(2..=6),
            ..NetConfig::default()
        };
        let m = CodecModel::<f32>::new(cfg.clone(), case).map_err(|e| e.to_string())?;
        let (mm, nn) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let shape = vec![1, mm, nn, cfg.latent_channels];
        let count = mm * nn * cfg.latent_channels;
        let mut sym = || {
            SymbolTensor::new(shape.clone(), (0..count).map(|_| r.gen_range(0..cfg.levels)).collect(), cfg.levels)
                .unwrap()
        };
        let (sa, sb) = (sym(), sym());
        let bytes = encode_container(&m, &sa, &sb).and_then(|c| c.pack()).map_err(|e| e.to_string())?;
        match decode_both(&m, &bytes) {
            Ok((Some(a), Some(b))) if a == sa && b == sb => {}
            _ => mismatches += 1,
        }
    }

    let mut worst_excess = f64::NEG_INFINITY;
    for (levels, sharp) in [(8, 0.0), (8, 4.0), (16, 8.0), (3, 2.0)] {
        let syms: Vec<usize> = (0..100_000).map(|_| r.gen_range(0..levels)).collect();
        let bytes = ac_encode(&syms, &mut Adaptive::new(levels, 5, sharp)).map_err(|e| e.to_string())?;
        let back = ac_decode(&bytes, &mut Adaptive::new(levels, 5, sharp), syms.len()).map_err(|e| e.to_string())?;
        if back != syms {
            mismatches += 1;
        }
        let ideal = ideal_bits(&syms, &mut Adaptive::new(levels, 5, sharp)).map_err(|e| e.to_string())?;
        worst_excess = worst_excess.max((bytes.len() * 8) as f64 - (ideal * 1.01 + 64.0));
    }

    let cfg = NetConfig {
        base_channels: 8,
        latent_channels: 3,
        levels: 5,
        entropy_channels: 4,
        resconv_repeats: 1,
        ..NetConfig::default()
    };
    let m = CodecModel::<f32>::new(cfg, 17).map_err(|e| e.to_string())?;
    let (mut flips, mut silent) = (0, 0);
    for seed in 0..4u64 {
        let mut r = rng(seed);
        let mut sym = || SymbolTensor::new(vec![1, 2, 3, 3], (0..18).map(|_| r.gen_range(0..5)).collect(), 5).unwrap();
        let (sa, sb) = (sym(), sym());
        let bytes = encode_container(&m, &sa, &sb).and_then(|c| c.pack()).map_err(|e| e.to_string())?;
        for i in 0..bytes.len() {
            for mask in [0x01u8, 0x10, 0x80, 0xff] {
                let mut bad = bytes.clone();
                bad[i] ^= mask;
                flips += 1;
                if let Ok((Some(a), Some(b))) = decode_both(&m, &bad) {
                    if a != sa || b != sb {
                        silent += 1;
                    }
                }
            }
        }
    }
    ensure(
        mismatches == 0 && worst_excess <= 0.0 && silent == 0,
        format!(
            "round-trip mismatches {mismatches}/1004; worst length excess over 1% + 64 bits: {worst_excess:.0} bits; silent acceptances {silent}/{flips} flips"
        ),
    )
}

fn causality() -> Check {
    let cfg = NetConfig { latent_channels: 3, levels: 6, entropy_channels: 5, ..NetConfig::default() };
    let m = CodecModel::<f64>::new(cfg, 60).map_err(|e| e.to_string())?;
    let (k, mm, nn, l) = (3, 4, 4, 6);
    let probs = |v: &Tensor<f64>| -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input(v.clone());
        let p = m.entropy_forward(&mut g, x, Side::A).unwrap();
        g.value(p).data().to_vec()
    };
    let base = rand(&[1, mm, nn, k], -1.0, 1.0, 61);
    let p0 = probs(&base);
    let mut r = rng(62);
    let (mut leaks, mut checked, mut causal_effect) = (0, 0, 0);
    for pos in 0..k * mm * nn {
        let mut pert = base.clone();
        for q in pos..k * mm * nn {
            let (qk, qm, qn) = (q / (mm * nn), (q / nn) % mm, q % nn);
            pert.data_mut()[(qm * nn + qn) * k + qk] = r.gen_range(-1.0..1.0);
        }
        let p1 = probs(&pert);
        let at = |p: &[f64]| p[pos * l..(pos + 1) * l].to_vec();
        checked += 1;
        if at(&p0) != at(&p1) {
            leaks += 1;
        }
        if pos > 0 {
            let mut past = base.clone();
            let q = pos - 1;
            let (qk, qm, qn) = (q / (mm * nn), (q / nn) % mm, q % nn);
            past.data_mut()[(qm * nn + qn) * k + qk] += 0.5;
            if at(&probs(&past)) != at(&p0) {
                causal_effect += 1;
            }
        }
    }
    ensure(
        leaks == 0,
        format!("{leaks} of {checked} positions changed under non-causal perturbation; {causal_effect} of {} react to the previous symbol", checked - 1),
    )
}

/// Smooth colour fields with stripes and discs, 64x64.
fn synthetic_images(n: usize, seed: u64) -> Vec<RgbImage> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let base: [f64; 3] = [r.gen(), r.gen(), r.gen()];
            let grad: [f64; 3] = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            let angle = r.gen_range(0.0..std::f64::consts::PI);
            let freq = r.gen_range(0.05..0.4);
            let stripe = r.gen_range(0.0..0.3);
            let discs: Vec<(f64, f64, f64, [f64; 3])> = (0..r.gen_range(1..4))
                .map(|_| {
                    (
                        r.gen_range(0.0..64.0),
                        r.gen_range(0.0..64.0),
                        r.gen_range(5.0..20.0),
                        [r.gen(), r.gen(), r.gen()],
                    )
                })
                .collect();
            RgbImage::from_fn(64, 64, |x, y| {
                let (fx, fy) = (x as f64, y as f64);
                let t = (fx * angle.cos() + fy * angle.sin()) / 64.0;
                let s = stripe * (freq * (fx * angle.sin() - fy * angle.cos())).sin();
                let mut px = [0u8; 3];
                for ch in 0..3 {
                    let mut v = base[ch] * 0.6 + grad[ch] * 0.3 * t + s;
                    for (cx, cy, rad, col) in &discs {
                        if (fx - cx).powi(2) + (fy - cy).powi(2) < rad * rad {
                            v = col[ch];
                        }
                    }
                    px[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
                image::Rgb(px)
            })
        })
        .collect()
}

fn moving_average(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn training_smoke() -> Check {
    let t = Instant::now();
    let corpus = Corpus::new((0..16).map(|i| format!("synthetic{i:02}")).collect(), synthetic_images(16, 70), 64)
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig { steps: 300, log_every: 0, ..TrainConfig::default() };
    let mut trainer = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let reports = trainer.run(&corpus, |_, _| {}).map_err(|e| e.to_string())?;
    let totals: Vec<f64> = reports.iter().map(|r| r.total).collect();
    let start = moving_average(&totals[..10]);
    let end = moving_average(&totals[totals.len() - 10..]);
    let drop = (start - end) / start.abs();
    // the objective is bounded below by -3 (three similarity terms at 1)
    let shifted = (start - end) / (start + 3.0);

    let images = corpus.eval_images::<f32>().map_err(|e| e.to_string())?;
    let rows = evaluate(&trainer.model, &images).map_err(|e| e.to_string())?;
    let mean_of = |dec: &[&str]| {
        let v: Vec<f64> = rows.iter().filter(|r| dec.contains(&r.decoder)).map(|r| r.ms_ssim).collect();
        moving_average(&v)
    };
    let central = mean_of(&["central"]);
    let side = mean_of(&["side_a", "side_b"]);

    let overhead = 8.0 * (FLUSH_BYTES + 1) as f64;
    let mut worst_rate = f64::NEG_INFINITY;
    let (mut est_total, mut real_total) = (0.0, 0.0);
    for (_, x) in &images {
        let c = code_image(&trainer.model, x).map_err(|e| e.to_string())?;
        let pixels = (x.shape()[1] * x.shape()[2]) as f64;
        for s in [Side::A, Side::B] {
            let (est, real) = (c.est_bpp(s) * pixels, c.real_bpp(s) * pixels);
            est_total += est;
            real_total += real;
            worst_rate = worst_rate.max((real - est).abs() - (0.05 * est + overhead));
        }
    }
    let dt = t.elapsed();
    ensure(
        drop >= 0.3 && central >= side && worst_rate <= 0.0 && dt < Duration::from_secs(1800),
        format!(
            "total {start:.4} -> {end:.4} (10-step means): drop {:.1}% of |start|, {:.1}% above the -3 floor; \
             MS-SSIM central {central:.4} vs mean side {side:.4}; rate est {est_total:.0} vs real {real_total:.0} bits, \
             worst excess over 5% + {overhead:.0} bits: {worst_rate:.1}; {:.0} s",
            100.0 * drop,
            100.0 * shifted,
            dt.as_secs_f64()
        ),
    )
}

fn parameter_sharing() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for (label, base) in [("desk", NetConfig::default()), ("full scale", NetConfig::full_scale())] {
        let count = |share: bool| -> Result<usize> {
            let m = CodecModel::<f32>::new(NetConfig { share_decoders: share, ..base.clone() }, 0)?;
            Ok(m.param_census().total)
        };
        let (s, n) = (count(true).map_err(|e| e.to_string())?, count(false).map_err(|e| e.to_string())?);
        ok &= s < n;
        lines.push(format!("{label} {s}/{n} = {:.3}", s as f64 / n as f64));
    }
    ensure(ok, format!("share/non-share trainable counts: {} (reference full-scale ratio 0.436)", lines.join(", ")))
}

fn channel_simulation() -> Check {
    let out = channel_outcomes(0.5, 10_000, 80).map_err(|e| e.to_string())?;
    let f = out.iter().filter(|&&o| o == Outcome::Central).count() as f64 / out.len() as f64;
    ensure((f - 0.25).abs() <= 0.02, format!("both-received fraction {f:.4}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("quantizer convergence", quantizer_convergence),
        ("MR-SSIM weight oracle", mr_weight_oracle),
        ("SSIM-family identities", ssim_identities),
        ("gradient suite", gradient_suite),
        ("straight-through contract", straight_through_contract),
        ("importance expansion", importance_expansion),
        ("arithmetic coding", arithmetic_coding),
        ("entropy-model causality", causality),
        ("desk-scale training smoke", training_smoke),
        ("parameter sharing", parameter_sharing),
        ("channel simulation", channel_simulation),
    ];
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match res {
            Ok(msg) => println!("PASS {n:>2} {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {msg}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
