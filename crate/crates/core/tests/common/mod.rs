#![allow(dead_code)]

use rand::Rng;
use tvcd_core::autodiff::{Graph, Var};
use tvcd_core::params::ParamStore;
use tvcd_core::Tensor;

pub const FD_STEP: f64 = 1e-3;
/// Denominator floor for relative errors; gradients below it are compared
/// absolutely against this scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: (usize, usize),
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Five-point central differences on `picks` scalar entries drawn uniformly
/// from `inputs`. `build` places the inputs on the graph (as parameters
/// when `grad` is set) and returns the scalar output and the input vars.
pub fn fd_check<R: Rng>(
    inputs: &[Tensor],
    picks: usize,
    rng: &mut R,
    build: impl Fn(&mut Graph, &[Tensor], bool) -> (Var, Vec<Var>),
) -> FdReport {
    let mut g = Graph::new();
    let (out, vars) = build(&mut g, inputs, true);
    let grads = g.backward(out);
    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let (out, _) = build(&mut g, ts, false);
        g.scalar(out)
    };
    let mut report = FdReport {
        checked: 0,
        worst: 0.0,
        worst_at: (0, 0),
    };
    let mut work = inputs.to_vec();
    for _ in 0..picks {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let analytic = grads.get(vars[t]).map_or(0.0, |g| g.data()[flat]);
        let orig = work[t].data()[flat];
        let mut at = |k: f64| {
            work[t].data_mut()[flat] = orig + k * FD_STEP;
            eval(&work)
        };
        let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
        work[t].data_mut()[flat] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
        let err = rel_err(analytic, numeric);
        if err > report.worst {
            report.worst = err;
            report.worst_at = (t, flat);
        }
        report.checked += 1;
    }
    report
}

pub fn place(g: &mut Graph, ts: &[Tensor], grad: bool) -> Vec<Var> {
    ts.iter()
        .map(|t| if grad { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect()
}

/// Copies the values in `ts` (in store order) into a clone of `store`.
pub fn with_values(store: &ParamStore, ts: &[Tensor]) -> ParamStore {
    let mut s = store.clone();
    for (id, t) in store.ids().zip(ts) {
        *s.get_mut(id) = t.clone();
    }
    s
}

pub fn values(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

/// Adds `N(0, std^2)` noise to every parameter so that zero-initialized
/// layers carry gradient.
pub fn jitter<R: Rng>(store: &mut ParamStore, std: f64, rng: &mut R) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (r, c) = store.get(id).shape();
        let noise = Tensor::randn(r, c, std, rng);
        store.get_mut(id).axpy(1.0, &noise);
    }
}
