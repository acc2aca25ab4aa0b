//! Finite-difference checks for every differentiable graph op.

use mdq_core::diff::{finite_diff_check, FdOptions, Graph, MaskType, Padding, Var};
use mdq_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;

fn rand(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape, lo, hi, &mut rng)
}

/// Values in `[0.1, 1]` with random sign, away from kinks at zero.
fn signed(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(0.1..1.0);
        if rng.gen::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Contracts an op output with a fixed random tensor so every output
/// coordinate contributes with its own weight.
fn probe(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let r = rand(g.shape(y), -1.0, 1.0, 99);
    let r = g.input(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let opts = FdOptions { epsilon: 1e-6, samples: Some(60), seed: 5 };
    let rep = finite_diff_check(|g, v| f(g, v).and_then(|y| probe(g, y)), inputs, &opts).unwrap();
    assert!(rep.max_rel_err < TOL, "{name}: rel err {} at {:?}", rep.max_rel_err, rep.worst);
}

#[test]
fn conv2d_variants() {
    for (stride, dil, pad) in [
        (1, 1, Padding::Same),
        (2, 1, Padding::Same),
        (4, 1, Padding::Same),
        (1, 2, Padding::Same),
        (1, 4, Padding::Same),
        (1, 1, Padding::Valid),
    ] {
        let x = rand(&[2, 8, 8, 3], -1.0, 1.0, 1);
        let w = rand(&[3, 3, 3, 4], -0.5, 0.5, 2);
        check(&format!("conv2d s{stride} d{dil} {pad:?}"), &[x, w], |g, v| g.conv2d(v[0], v[1], stride, dil, pad));
    }
    let x = rand(&[1, 8, 8, 2], -1.0, 1.0, 3);
    let w = rand(&[5, 5, 2, 3], -0.5, 0.5, 4);
    check("conv2d 5x5 s2", &[x, w], |g, v| g.conv2d(v[0], v[1], 2, 1, Padding::Same));
}

#[test]
fn conv_transpose2d_strides() {
    for stride in [2, 4] {
        let x = rand(&[2, 3, 3, 2], -1.0, 1.0, 5);
        let w = rand(&[5, 5, 3, 2], -0.5, 0.5, 6);
        check(&format!("conv_transpose2d s{stride}"), &[x, w], |g, v| g.conv_transpose2d(v[0], v[1], stride));
    }
}

#[test]
fn conv3d_masked_both_types() {
    for mask in [MaskType::A, MaskType::B] {
        let x = rand(&[2, 3, 4, 4, 2], -1.0, 1.0, 7);
        let w = rand(&[3, 3, 3, 2, 3], -0.5, 0.5, 8);
        check(&format!("conv3d {mask:?}"), &[x, w], |g, v| g.conv3d_masked(v[0], v[1], mask));
    }
}

#[test]
fn elementwise_binary() {
    let a = rand(&[2, 3, 3, 2], -1.0, 1.0, 10);
    let b = rand(&[2, 3, 3, 2], 0.5, 1.5, 11);
    let bias = rand(&[2], -1.0, 1.0, 12);
    check("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check("div", &[a.clone(), b], |g, v| g.div(v[0], v[1]));
    check("add_bias", &[a, bias], |g, v| g.add_bias(v[0], v[1]));
}

#[test]
fn elementwise_unary() {
    let x = signed(&[2, 4, 4, 3], 13);
    let pos = rand(&[2, 4, 4, 3], 0.05, 1.0, 14);
    check("scale", std::slice::from_ref(&x), |g, v| Ok(g.scale(v[0], 0.7)));
    check("add_scalar", std::slice::from_ref(&x), |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check("relu", std::slice::from_ref(&x), |g, v| Ok(g.relu(v[0])));
    check("leaky_relu", std::slice::from_ref(&x), |g, v| Ok(g.leaky_relu(v[0], 0.2)));
    check("sigmoid", std::slice::from_ref(&x), |g, v| Ok(g.sigmoid(v[0])));
    check("tanh", std::slice::from_ref(&x), |g, v| Ok(g.tanh(v[0])));
    check("abs", std::slice::from_ref(&x), |g, v| Ok(g.abs(v[0])));
    check("clamp", std::slice::from_ref(&x), |g, v| Ok(g.clamp(v[0], -0.55, 0.45)));
    check("pow_clamped", std::slice::from_ref(&pos), |g, v| Ok(g.pow_clamped(v[0], 0.75, 1e-6)));
    check("ln_floor", &[pos], |g, v| Ok(g.ln_floor(v[0], 1e-9)));
}

#[test]
fn reductions_and_reshapes() {
    let x = rand(&[2, 4, 4, 3], -1.0, 1.0, 15);
    let y = rand(&[2, 4, 4, 2], -1.0, 1.0, 16);
    check("sum", std::slice::from_ref(&x), |g, v| Ok(g.sum(v[0])));
    check("mean", std::slice::from_ref(&x), |g, v| Ok(g.mean(v[0])));
    check("mean_per_item", std::slice::from_ref(&x), |g, v| Ok(g.mean_per_item(v[0])));
    check("softmax", std::slice::from_ref(&x), |g, v| Ok(g.softmax(v[0])));
    check("concat", &[x.clone(), y], |g, v| g.concat(&[v[0], v[1]]));
    check("avg_pool2", std::slice::from_ref(&x), |g, v| g.avg_pool2(v[0]));
    check("to_depth", std::slice::from_ref(&x), |g, v| g.to_depth(v[0]));
    let idx: Vec<usize> = (0..32).map(|i| (i * 7) % 3).collect();
    check("gather", &[x], move |g, v| g.gather(v[0], idx.clone()));
}

#[test]
fn windowed_statistics() {
    let taps = [0.25, 0.5, 0.25];
    let x = rand(&[2, 6, 6, 3], 0.0, 1.0, 17);
    let y = rand(&[2, 6, 6, 3], 0.0, 1.0, 18);
    check("window_filter", std::slice::from_ref(&x), |g, v| g.window_filter(v[0], &taps));
    check("windowed_mean", std::slice::from_ref(&x), |g, v| g.windowed_mean(v[0], &taps));
    check("windowed_variance", std::slice::from_ref(&x), |g, v| g.windowed_variance(v[0], &taps));
    check("windowed_covariance", &[x, y], |g, v| g.windowed_covariance(v[0], v[1], &taps));
}

#[test]
fn quantization_ops() {
    let z = rand(&[1, 3, 3, 4], -1.2, 1.2, 19);
    let c = Tensor::new(vec![5], vec![-1.0, -0.45, 0.05, 0.5, 1.1]).unwrap();
    for sigma in [1.0, 4.0] {
        check(&format!("soft_quantize sigma {sigma}"), &[z.clone(), c.clone()], |g, v| {
            Ok(g.soft_quantize(v[0], v[1], sigma))
        });
    }
    // every d*K - k sits at least 0.1 away from the clip points
    let d = Tensor::new(vec![1, 2, 2, 1], vec![0.05, 0.3, 0.55, 0.8]).unwrap();
    check("expand_importance", &[d], |g, v| g.expand_importance(v[0], 4));
}

#[test]
fn straight_through_backward_is_soft_backward() {
    let z = rand(&[1, 4, 4, 3], -1.2, 1.2, 20);
    let c = Tensor::new(vec![4], vec![-1.0, -0.3, 0.4, 1.0]).unwrap();
    let grads = |st: bool| {
        let mut g = Graph::new();
        let (zv, cv) = (g.input(z.clone()), g.input(c.clone()));
        let q = if st { g.straight_through(zv, cv, 2.0).0 } else { g.soft_quantize(zv, cv, 2.0) };
        let out = probe(&mut g, q).unwrap();
        let gr = g.backward(out);
        (gr.wrt(zv).unwrap().clone(), gr.wrt(cv).unwrap().clone())
    };
    assert_eq!(grads(true), grads(false));
}

#[test]
fn stop_gradient_blocks() {
    let mut g = Graph::new();
    let x = g.input(rand(&[3], -1.0, 1.0, 21));
    let s = g.stop_gradient(x);
    let y = g.mul(s, x).unwrap();
    let out = g.sum(y);
    let gr = g.backward(out);
    // d/dx sum(sg(x) * x) = x
    assert_eq!(gr.wrt(x).unwrap(), g.value(x));
}

#[test]
fn abs_subgradient_is_zero_at_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![3], vec![-2.0, 0.0, 3.0]).unwrap());
    let a = g.abs(x);
    let out = g.sum(a);
    let gr = g.backward(out);
    assert_eq!(gr.wrt(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
}
