//! Central finite-difference checks of reverse-mode gradients.
//!
//! The oracle side only ever evaluates forward passes; it never consults the
//! tape's backward rules.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Perturbation used by the checks (the engine computes in `f64`).
pub const DEFAULT_STEP: f64 = 1e-4;

/// Five-point central difference `(−f(2h) + 8f(h) − 8f(−h) + f(−2h)) / 12h`,
/// where `f(d)` evaluates the loss with the probed entry shifted by `d`.
/// Truncation error is `O(h⁴)`, so `h` can be large enough to keep rounding
/// noise well below the tolerance.
fn central_difference(mut f: impl FnMut(f64) -> f64) -> f64 {
    let h = DEFAULT_STEP;
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, f64, f64)>,
}

impl CheckReport {
    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((index, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.or(self.worst);
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-7)`; the floor keeps structurally-zero
/// gradients from dividing noise by noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

fn sample_indices(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Checks d(loss)/d(input) for a scalar function of one tensor. `build`
/// receives a fresh graph and the input variable and returns the loss.
pub fn check_input(
    input: &Tensor,
    build: impl Fn(&mut Graph, Var) -> Var,
    max_entries: usize,
    rng: &mut ChaCha8Rng,
) -> CheckReport {
    let mut g = Graph::new();
    let x = g.leaf(input.clone());
    let loss = build(&mut g, x);
    let grads = g.backward(loss);
    let analytic = grads.wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));

    let eval = |t: Tensor| {
        let mut g = Graph::new();
        let x = g.constant(t);
        let l = build(&mut g, x);
        g.value(l).item()
    };
    let mut report = CheckReport::default();
    for i in sample_indices(input.len(), max_entries, rng) {
        let numeric = central_difference(|d| {
            let mut t = input.clone();
            t.data_mut()[i] += d;
            eval(t)
        });
        report.record(i, analytic.data()[i], numeric);
    }
    report
}

/// Checks parameter gradients of `build` for every trainable tensor in
/// `store` (or only `only`, when given), sampling `per_tensor` entries each.
pub fn check_params(
    store: &ParamStore,
    build: impl Fn(&mut Graph, &ParamStore) -> Var,
    only: Option<&[ParamId]>,
    per_tensor: usize,
    rng: &mut ChaCha8Rng,
) -> CheckReport {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss);
    let analytic = grads.params(&g);

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().filter(|&id| store.is_trainable(id)).collect(),
    };
    let mut report = CheckReport::default();
    let mut scratch = store.clone();
    for id in ids {
        let n = store.get(id).len();
        let an = analytic.iter().find(|(i, _)| *i == id).map(|(_, t)| t);
        for i in sample_indices(n, per_tensor, rng) {
            let orig = store.get(id).data()[i];
            let numeric = central_difference(|d| {
                scratch.get_mut(id).data_mut()[i] = orig + d;
                eval_params(&scratch, &build)
            });
            scratch.get_mut(id).data_mut()[i] = orig;
            let a = an.map_or(0.0, |t| t.data()[i]);
            report.record(id.index() * 1_000_000 + i, a, numeric);
        }
    }
    report
}

fn eval_params(store: &ParamStore, build: &impl Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let mut g = Graph::new();
    let l = build(&mut g, store);
    g.value(l).item()
}

/// Weighted-sum probe turning any tensor output into a scalar loss with
/// non-trivial gradients everywhere.
pub fn probe_weights(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn probe_loss(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w);
    g.sum(p)
}
