//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays an
//! independent check on the hand-written backward rules.

use rand::seq::index::sample;
use rand::Rng;

use crate::graph::{Graph, Grads, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.entries.len()
    }

    pub fn passed(&self, tol: f64) -> usize {
        self.entries.iter().filter(|e| e.rel_err < tol).count()
    }

    pub fn pass_fraction(&self, tol: f64) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.passed(tol) as f64 / self.entries.len() as f64
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `loss` w.r.t. the parameters of `store`
/// against central differences at `samples_per_param` random entries of
/// each tensor.
///
/// `loss` must build a fresh graph binding `store` trainable and return the
/// scalar loss node.
pub fn check_params<F>(
    store: &mut ParamStore,
    samples_per_param: usize,
    eps: f64,
    floor: f64,
    rng: &mut impl Rng,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&Graph, &ParamStore) -> Var,
{
    let g = Graph::new();
    let out = loss(&g, store);
    let grads: Grads = g.backward(out);
    let analytic: Vec<_> = store.ids().map(|id| grads.param(store, id).cloned()).collect();
    drop(g);

    let eval = |s: &ParamStore| {
        let g = Graph::new();
        let v = loss(&g, s);
        g.value(v).item()
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let picks = sample(rng, n, samples_per_param.min(n)).into_vec();
        for idx in picks {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + eps;
            let up = eval(store);
            store.get_mut(id).data_mut()[idx] = orig - eps;
            let down = eval(store);
            store.get_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.0].as_ref().map_or(0.0, |t| t.data()[idx]);
            report.entries.push(GradCheckEntry {
                param: store.name(id).to_string(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric, floor),
            });
        }
    }
    report
}
