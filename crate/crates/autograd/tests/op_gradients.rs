//! Every op's backward rule against central differences of its forward.

use dcaa_autograd::gradcheck::relative_error;
use dcaa_autograd::{par, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Builds `sum(op(inputs) * probe)` so every output element carries a
/// distinct weight, then checks d/d(input) for all inputs and entries.
fn check<F>(inputs: Vec<Tensor>, f: F)
where
    F: Fn(&Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        g.shape(f(&g, &vs))
    };
    let probe = rand_tensor(&mut rng, &probe_shape, -1.0, 1.0);
    let loss = |g: &Graph, vs: &[Var]| {
        let y = f(g, vs);
        let p = g.mul_const(y, probe.clone());
        g.sum(p)
    };
    let g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let l = loss(&g, &vs);
    let grads = g.backward(l);
    let eps = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vs[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.numel() {
            let eval = |delta: f64| {
                let g = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, u)| {
                        let mut u = u.clone();
                        if j == k {
                            u.data_mut()[i] += delta;
                        }
                        g.constant(u)
                    })
                    .collect();
                let out = loss(&g, &vs);
                g.value(out).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric, 1e-6);
            assert!(err < 1e-5, "input {k} entry {i}: analytic {a} numeric {numeric}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_binary() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.scale(g.add_scalar(v[0], 0.3), -2.5));
    check(vec![a], |g, v| g.mul(v[0], v[0]));
}

#[test]
fn activations() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[1, 2, 3, 3], -2.0, 2.0);
    check(vec![x.clone()], |g, v| g.relu(v[0]));
    check(vec![x.clone()], |g, v| g.leaky_relu(v[0], 0.2));
    check(vec![x.clone()], |g, v| g.sigmoid(v[0]));
    check(vec![x.clone()], |g, v| g.tanh(v[0]));
    check(vec![x.clone()], |g, v| g.exp(v[0]));
    check(vec![x.clone()], |g, v| g.log_sigmoid(v[0]));
    let pos = rand_tensor(&mut r, &[2, 4], 0.1, 2.0);
    check(vec![pos], |g, v| g.log_clamped(v[0], 1e-7));
}

#[test]
fn softmaxes() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 4, 2, 3], -3.0, 3.0);
    check(vec![x.clone()], |g, v| g.softmax_channels(v[0]));
    check(vec![x], |g, v| g.log_softmax_channels(v[0]));
}

#[test]
fn convolution_all_operands() {
    let mut r = rng();
    for &(stride, k) in &[(1usize, 3usize), (2, 3), (1, 1), (2, 4)] {
        let x = rand_tensor(&mut r, &[2, 3, 6, 5], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[4, 3, k, k], -0.5, 0.5);
        let b = rand_tensor(&mut r, &[4], -0.5, 0.5);
        check(vec![x, w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2));
    }
}

#[test]
fn layout_ops() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
    check(vec![a.clone(), b.clone()], |g, v| g.concat(&[v[0], v[1], v[0]]));
    check(vec![b.clone()], |g, v| g.slice_channels(v[0], 1, 2));
    let w = rand_tensor(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
    check(vec![b.clone(), w], |g, v| g.mul_channel(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.upsample_nearest(v[0], 2));
    check(vec![a.clone()], |g, v| g.resize_bilinear(v[0], 7, 5));
    check(vec![b.clone()], |g, v| g.resize_bilinear(v[0], 2, 2));
    check(vec![a.clone()], |g, v| g.global_avg_pool(v[0]));
    check(vec![a.clone()], |g, v| g.reshape(v[0], &[4, 9]));
    check(vec![a.clone()], |g, v| g.mean(v[0]));
    let labels = vec![0u8, 1, 2, 2, 1, 0, 1, 1, 2, 2, 2, 2, 0, 0, 1, 1, 2, 1];
    check(vec![a], move |g, v| g.pick_labels(v[0], &labels));
}

#[test]
fn frozen_params_block_accumulation_but_pass_gradient() {
    let mut store = dcaa_autograd::ParamStore::new();
    let w = store.add("w", Tensor::from_vec(&[2], vec![2.0, 3.0]));
    let g = Graph::new();
    let x = g.input(Tensor::from_vec(&[2], vec![1.0, 1.0]));
    let wv = g.param(&store, w, false);
    let l = g.sum(g.mul(x, wv));
    let grads = g.backward(l);
    assert!(grads.param(&store, w).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 3.0]);
}

#[test]
fn detach_cuts_the_tape() {
    let g = Graph::new();
    let x = g.input(Tensor::from_vec(&[1], vec![3.0]));
    let y = g.mul(x, x);
    let z = g.mul(g.detach(y), x);
    let grads = g.backward(g.sum(z));
    assert_eq!(grads.get(x).unwrap().data(), &[9.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parallel_and_sequential_agree_bitwise(seed in 0u64..1000, batch in 1usize..4, stride in 1usize..3) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut r, &[batch, 3, 9, 8], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[5, 3, 3, 3], -1.0, 1.0);
        let run = || {
            let g = Graph::new();
            let xi = g.input(x.clone());
            let wi = g.input(w.clone());
            let y = g.softmax_channels(g.conv2d(xi, wi, None, stride, 1));
            let y = g.resize_bilinear(y, 11, 13);
            let l = g.sum(g.log_clamped(y, 1e-7));
            let gr = g.backward(l);
            (g.value(l).item(), gr.get(xi).unwrap().clone(), gr.get(wi).unwrap().clone())
        };
        par::set_enabled(false);
        let a = run();
        par::set_enabled(true);
        let b = run();
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
        prop_assert_eq!(a.2, b.2);
    }
}
