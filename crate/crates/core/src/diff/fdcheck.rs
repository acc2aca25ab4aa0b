//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Coordinates to check; `None` checks all of them.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { epsilon: 1e-5, samples: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// `(tensor, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn pick(total: usize, samples: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match samples {
        Some(n) if n < total => {
            let mut v = sample(rng, total, n).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite-difference epsilon {eps} outside [1e-6, 1e-2]")));
    }
    Ok(())
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences, sampling coordinates uniformly across all inputs.
pub fn finite_diff_check<T, F>(f: F, inputs: &[Tensor<T>], opts: &FdOptions) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    check_eps(opts.epsilon)?;
    let eval = |xs: &[Tensor<T>]| -> Result<(Graph<T>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs)?;
    let base = g.scalar(out);
    if !base.is_finite() {
        return Err(Error::NonFinite("function value at the unperturbed point".into()));
    }
    let grads = g.backward(out);
    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let mut work = inputs.to_vec();
    for flat in pick(total, opts.samples, &mut rng) {
        let ti = offsets.partition_point(|&o| o <= flat) - 1;
        let ci = flat - offsets[ti];
        let analytic = grads.wrt(vars[ti]).map_or(0.0, |t| t.data()[ci].f64());
        let orig = work[ti].data()[ci];
        let h = T::of(opts.epsilon);
        work[ti].data_mut()[ci] = orig + h;
        let (gp, _, op) = eval(&work)?;
        work[ti].data_mut()[ci] = orig - h;
        let (gm, _, om) = eval(&work)?;
        work[ti].data_mut()[ci] = orig;
        let numeric = (gp.scalar(op).f64() - gm.scalar(om).f64()) / (2.0 * opts.epsilon);
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::NonFinite(format!("input {ti} coordinate {ci}")));
        }
        let e = relative_error(analytic, numeric);
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((ti, ci));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Same check, perturbing the trainable entries of a parameter store.
pub fn finite_diff_check_params<T, F>(store: &ParamStore<T>, f: F, opts: &FdOptions) -> Result<FdReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    check_eps(opts.epsilon)?;
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out);
    let ids: Vec<ParamId> = store.trainable().map(|(id, _)| id).collect();
    let offsets: Vec<usize> = ids
        .iter()
        .scan(0, |acc, id| {
            let o = *acc;
            *acc += store.get(*id).tensor.len();
            Some(o)
        })
        .collect();
    let total: usize = ids.iter().map(|id| store.get(*id).tensor.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = FdReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let value = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let o = f(&mut g, s)?;
        Ok(g.scalar(o).f64())
    };
    for flat in pick(total, opts.samples, &mut rng) {
        let k = offsets.partition_point(|&o| o <= flat) - 1;
        let (id, ci) = (ids[k], flat - offsets[k]);
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[ci].f64());
        let orig = work.get(id).tensor.data()[ci];
        let h = T::of(opts.epsilon);
        work.get_mut(id).tensor.data_mut()[ci] = orig + h;
        let plus = value(&work)?;
        work.get_mut(id).tensor.data_mut()[ci] = orig - h;
        let minus = value(&work)?;
        work.get_mut(id).tensor.data_mut()[ci] = orig;
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::NonFinite(format!("parameter `{}` coordinate {ci}", store.get(id).id)));
        }
        let e = relative_error(analytic, numeric);
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((id.0, ci));
        }
        report.checked += 1;
    }
    Ok(report)
}
