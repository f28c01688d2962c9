//! Shared helpers: random tensors, scalar-loop reference implementations of
//! every loss, and a finite-difference checker for models that own their
//! parameter store.

#![allow(dead_code)]

use dcaa_autograd::gradcheck::{relative_error, GradCheckEntry, GradCheckReport};
use dcaa_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = r.random_range(1e-12..1.0);
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * normal(r)).collect())
}

/// Scores strictly inside (0, 1).
pub fn random_scores(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(0.02..0.98)).collect())
}

/// Per-pixel simplex over channel 1 of a `[B, C, H, W]` tensor.
pub fn random_simplex(r: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize, temp: f64) -> Tensor {
    let mut out = vec![0.0; b * c * h * w];
    let hw = h * w;
    for n in 0..b {
        for p in 0..hw {
            let e: Vec<f64> = (0..c).map(|_| (temp * normal(r)).exp()).collect();
            let s: f64 = e.iter().sum();
            for ch in 0..c {
                out[(n * c + ch) * hw + p] = e[ch] / s;
            }
        }
    }
    Tensor::from_vec(&[b, c, h, w], out)
}

/// Rows of a `[B, K]` simplex.
pub fn random_rows(r: &mut ChaCha8Rng, b: usize, k: usize) -> Tensor {
    let t = random_simplex(r, b, k, 1, 1, 1.0);
    t.reshape(&[b, k])
}

/// Labels in `0..=l`, roughly `ignore` of them 0.
pub fn random_labels(r: &mut ChaCha8Rng, n: usize, l: usize, ignore: f64) -> Vec<u8> {
    (0..n)
        .map(|_| if r.random::<f64>() < ignore { 0 } else { r.random_range(1..=l) as u8 })
        .collect()
}

pub fn at(t: &Tensor, n: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + y) * s[3] + x]
}

pub fn lnc(v: f64) -> f64 {
    v.max(EPS).ln()
}

pub fn value(g: &Graph, v: Var) -> f64 {
    g.value(v).item()
}

// ---- reference losses ------------------------------------------------------

pub fn ref_mean_ln(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| lnc(v)).sum::<f64>() / t.numel() as f64
}

pub fn ref_mean_ln1m(t: &Tensor) -> f64 {
    t.data().iter().map(|&v| lnc(1.0 - v)).sum::<f64>() / t.numel() as f64
}

pub fn ref_cgan(real: &Tensor, fake: &Tensor) -> f64 {
    ref_mean_ln(real) + ref_mean_ln1m(fake)
}

pub fn ref_condition_nll(probs: &Tensor, conds: &[usize]) -> f64 {
    let k = probs.shape()[1];
    let mut acc = 0.0;
    for (b, &c) in conds.iter().enumerate() {
        acc -= lnc(probs.data()[b * k + c]);
    }
    acc / conds.len() as f64
}

pub fn ref_cls(real: &Tensor, rc: &[usize], fake: &Tensor, fc: &[usize]) -> f64 {
    ref_condition_nll(real, rc) + ref_condition_nll(fake, fc)
}

/// Mean over labelled pixels of `-w * log p[label]`, where `logp` already
/// holds log-probabilities.
pub fn ref_nll(logp: &Tensor, labels: &[u8], w: Option<&[f64]>, mean: bool) -> f64 {
    let (b, _, h, wd) = logp.dims4();
    let (mut acc, mut n) = (0.0, 0usize);
    for i in 0..b {
        for y in 0..h {
            for x in 0..wd {
                let p = (i * h + y) * wd + x;
                let l = labels[p];
                if l == 0 {
                    continue;
                }
                let wt = w.map_or(1.0, |w| w[p]);
                acc -= wt * at(logp, i, l as usize - 1, y, x);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else if mean {
        acc / n as f64
    } else {
        acc
    }
}

pub fn ref_sc(probs: &Tensor, labels: &[u8]) -> f64 {
    ref_nll(&probs.map(lnc), labels, None, true)
}

pub fn ref_log_softmax(logits: &Tensor) -> Tensor {
    let (b, c, h, w) = logits.dims4();
    let mut out = logits.clone();
    for i in 0..b {
        for y in 0..h {
            for x in 0..w {
                let vals: Vec<f64> = (0..c).map(|ch| at(logits, i, ch, y, x)).collect();
                let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for ch in 0..c {
                    out.data_mut()[((i * c + ch) * h + y) * w + x] = vals[ch] - lse;
                }
            }
        }
    }
    out
}

pub fn ref_csat(ca: &Tensor, active: &Tensor) -> f64 {
    -(ref_mean_ln(ca) + ref_mean_ln(active))
}

pub fn ref_dat(ca: &Tensor, all: &[Tensor]) -> f64 {
    -(ref_mean_ln(ca) + all.iter().map(ref_mean_ln).sum::<f64>())
}

pub fn ref_hard(scores: &Tensor, pseudo: &[u8], mean: bool) -> f64 {
    let (mut acc, mut n) = (0.0, 0usize);
    for (i, &l) in pseudo.iter().enumerate() {
        if l == 0 {
            acc -= lnc(scores.data()[i]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else if mean {
        acc / n as f64
    } else {
        acc
    }
}

/// Brute-force attentive assignment: scan every class for the maximum,
/// keep the first index reaching it, label only if strictly above `lambda`.
pub fn ref_threshold(probs: &Tensor, lambda: f64) -> Vec<u8> {
    let (b, c, h, w) = probs.dims4();
    let mut out = Vec::with_capacity(b * h * w);
    for i in 0..b {
        for y in 0..h {
            for x in 0..w {
                let vals: Vec<f64> = (0..c).map(|ch| at(probs, i, ch, y, x)).collect();
                let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let arg = vals.iter().position(|&v| v == m).unwrap();
                out.push(if m > lambda { arg as u8 + 1 } else { 0 });
            }
        }
    }
    out
}

/// `sum_i W[:, i] * f_i` by explicit loops.
pub fn ref_fuse(feats: &[Tensor], weights: &Tensor) -> Tensor {
    let (b, d, h, w) = feats[0].dims4();
    let mut out = Tensor::zeros(&[b, d, h, w]);
    for (k, f) in feats.iter().enumerate() {
        for i in 0..b {
            for ch in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        out.data_mut()[((i * d + ch) * h + y) * w + x] += at(weights, i, k, y, x) * at(f, i, ch, y, x);
                    }
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- finite differences ----------------------------------------------------

/// Central-difference check of `loss` w.r.t. the store reached through
/// `store`, for models whose forward pass binds their own store.
pub fn fd_check<T>(
    model: &mut T,
    store: fn(&mut T) -> &mut ParamStore,
    per_param: usize,
    eps: f64,
    floor: f64,
    r: &mut ChaCha8Rng,
    loss: impl Fn(&Graph, &T) -> Var,
) -> GradCheckReport {
    let analytic = {
        let g = Graph::new();
        let v = loss(&g, model);
        let grads = g.backward(v);
        grads.for_store(store(model))
    };
    let eval = |m: &T| {
        let g = Graph::new();
        let v = loss(&g, m);
        g.value(v).item()
    };
    let ids: Vec<ParamId> = store(model).ids().collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let n = store(model).get(id).numel();
        for idx in sample(r, n, per_param.min(n)).into_vec() {
            let orig = store(model).get(id).data()[idx];
            store(model).get_mut(id).data_mut()[idx] = orig + eps;
            let up = eval(model);
            store(model).get_mut(id).data_mut()[idx] = orig - eps;
            let down = eval(model);
            store(model).get_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.0].data()[idx];
            report.entries.push(GradCheckEntry {
                param: store(model).name(id).to_string(),
                index: idx,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric, floor),
            });
        }
    }
    report
}
