//! Every loss against a scalar-loop reference on random small tensors, plus
//! closed-form spot values.

mod common;

use common::*;
use dcaa_autograd::{Graph, Tensor};
use dcaa_core::losses::{self, Normalization};
use dcaa_core::segnet::{attentive_fusion, fuse_features};
use dcaa_core::selftrain::{assign_from_fused, threshold_labels, upsample};
use dcaa_core::segnet::renormalize;
use rand::Rng;

const CASES: usize = 120;
const TOL: f64 = 1e-6;

fn dims(r: &mut rand_chacha::ChaCha8Rng) -> (usize, usize, usize, usize) {
    (r.random_range(1..4), r.random_range(2..6), r.random_range(1..5), r.random_range(1..5))
}

#[test]
fn adversarial_objective_matches_reference() {
    let mut r = rng(1);
    for _ in 0..CASES {
        let (b, _, h, w) = dims(&mut r);
        let real = random_scores(&mut r, &[b, 1, h, w]);
        let fake = random_scores(&mut r, &[b, 1, h, w]);
        let g = Graph::new();
        let got = value(&g, losses::cgan_loss(&g, g.constant(real.clone()), g.constant(fake.clone())));
        assert!((got - ref_cgan(&real, &fake)).abs() <= TOL);
        let (lr, lf) = (real.map(|p| (p / (1.0 - p)).ln()), fake.map(|p| (p / (1.0 - p)).ln()));
        let got = value(&g, losses::cgan_loss_logits(&g, g.constant(lr), g.constant(lf)));
        assert!((got - ref_cgan(&real, &fake)).abs() <= TOL);
    }
}

#[test]
fn condition_classification_matches_reference() {
    let mut r = rng(2);
    for _ in 0..CASES {
        let b = r.random_range(1..6);
        let k = r.random_range(2..5);
        let real = random_rows(&mut r, b, k);
        let fake = random_rows(&mut r, b, k);
        let rc: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let fc: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let g = Graph::new();
        let got = value(&g, losses::cls_loss(&g, g.constant(real.clone()), &rc, g.constant(fake.clone()), &fc));
        assert!((got - ref_cls(&real, &rc, &fake, &fc)).abs() <= TOL);
    }
}

#[test]
fn semantic_consistency_matches_reference() {
    let mut r = rng(3);
    for _ in 0..CASES {
        let (b, l, h, w) = dims(&mut r);
        let p = random_simplex(&mut r, b, l, h, w, 1.5);
        let y = random_labels(&mut r, b * h * w, l, 0.2);
        let g = Graph::new();
        let got = value(&g, losses::sc_loss(&g, g.constant(p.clone()), &y));
        assert!((got - ref_sc(&p, &y)).abs() <= TOL);
    }
}

#[test]
fn condition_specific_adversarial_matches_reference() {
    let mut r = rng(7);
    for _ in 0..CASES {
        let (b, k, h, w) = dims(&mut r);
        let ca = random_scores(&mut r, &[b, 1, h, w]);
        let all: Vec<Tensor> = (0..k).map(|_| random_scores(&mut r, &[b, 1, h, w])).collect();
        let i = r.random_range(0..k);
        let g = Graph::new();
        let got = value(&g, losses::csat_adv_loss(&g, g.constant(ca.clone()), g.constant(all[i].clone())));
        assert!((got - ref_csat(&ca, &all[i])).abs() <= TOL);
        let vars: Vec<_> = all.iter().map(|t| g.constant(t.clone())).collect();
        let got = value(&g, losses::dat_loss(&g, g.constant(ca.clone()), &vars));
        assert!((got - ref_dat(&ca, &all)).abs() <= TOL);
    }
}

#[test]
fn source_cross_entropy_matches_reference() {
    let mut r = rng(8);
    for _ in 0..CASES {
        let (b, l, h, w) = dims(&mut r);
        let ca = random_tensor(&mut r, &[b, l, h, w], 2.0);
        let br = random_tensor(&mut r, &[b, l, h, w], 2.0);
        let y = random_labels(&mut r, b * h * w, l, 0.25);
        let g = Graph::new();
        let (lca, lbr) = (g.log_softmax_channels(g.constant(ca.clone())), g.log_softmax_channels(g.constant(br.clone())));
        let got = value(&g, losses::source_ce_loss(&g, lca, Some(lbr), &y));
        let want = ref_nll(&ref_log_softmax(&ca), &y, None, true) + ref_nll(&ref_log_softmax(&br), &y, None, true);
        assert!((got - want).abs() <= TOL);
    }
}

#[test]
fn pseudo_labels_match_brute_force() {
    let mut r = rng(9);
    for case in 0..CASES {
        let (b, l, h, w) = dims(&mut r);
        let mut p = random_simplex(&mut r, b, l, h, w, 2.5);
        if case % 4 == 0 {
            // exact ties at the argmax
            let hw = h * w;
            for i in 0..b {
                let d = p.data_mut();
                d[(i * l) * hw] = 0.5;
                d[(i * l + 1) * hw] = 0.5;
                for ch in 2..l {
                    d[(i * l + ch) * hw] = 0.0;
                }
            }
        }
        for lambda in [0.5, 0.6, 0.7, 0.8, 0.9] {
            assert_eq!(threshold_labels(&p, lambda).unwrap(), ref_threshold(&p, lambda));
        }
    }
}

#[test]
fn fused_assignment_is_threshold_of_upsampled_renormalised_fusion() {
    let mut r = rng(10);
    for _ in 0..CASES / 4 {
        let (b, l, k) = (r.random_range(1..3), r.random_range(2..5), r.random_range(2..4));
        let (h, w) = (2, 2);
        let branches: Vec<Tensor> = (0..k).map(|_| random_simplex(&mut r, b, l, h, w, 2.0)).collect();
        let wts = random_simplex(&mut r, b, k, h, w, 1.0);
        let ca = random_simplex(&mut r, b, l, h, w, 2.0);
        let mut fused = ref_fuse(&branches, &wts).map(|v| 0.5 * v);
        fused.add_assign(&ca.map(|v| 0.5 * v));
        let g = Graph::new();
        let bv: Vec<_> = branches.iter().map(|t| g.constant(t.clone())).collect();
        let got = g.value(attentive_fusion(&g, &bv, g.constant(wts.clone()), g.constant(ca.clone())));
        assert!(max_abs_diff(&got, &fused) <= TOL);
        let want = ref_threshold(&renormalize(&upsample(&fused, 8, 8)), 0.6);
        assert_eq!(assign_from_fused(&fused, 0.6, 8, 8).unwrap(), want);
    }
}

#[test]
fn feature_fusion_matches_reference() {
    let mut r = rng(11);
    for _ in 0..CASES {
        let (b, d, h, w) = dims(&mut r);
        let k = r.random_range(2..5);
        let feats: Vec<Tensor> = (0..k).map(|_| random_tensor(&mut r, &[b, d, h, w], 1.0)).collect();
        let wts = random_simplex(&mut r, b, k, h, w, 1.0);
        let g = Graph::new();
        let fv: Vec<_> = feats.iter().map(|t| g.constant(t.clone())).collect();
        let got = g.value(fuse_features(&g, &fv, g.constant(wts.clone())));
        assert!(max_abs_diff(&got, &ref_fuse(&feats, &wts)) <= TOL);
    }
}

#[test]
fn target_losses_match_reference() {
    let mut r = rng(12);
    for _ in 0..CASES {
        let (b, l, h, w) = dims(&mut r);
        let logits = random_tensor(&mut r, &[b, l, h, w], 2.0);
        let y = random_labels(&mut r, b * h * w, l, 0.4);
        let d: Vec<f64> = (0..b * h * w).map(|_| r.random_range(0.0..1.0)).collect();
        let scores = random_scores(&mut r, &[b, 1, h, w]);
        let lp_ref = ref_log_softmax(&logits);
        for (norm, mean) in [(Normalization::Mean, true), (Normalization::Sum, false)] {
            let g = Graph::new();
            let lp = g.log_softmax_channels(g.constant(logits.clone()));
            let plain = value(&g, losses::plain_ce(&g, lp, &y, norm));
            assert!((plain - ref_nll(&lp_ref, &y, None, mean)).abs() <= TOL);
            let weighted = value(&g, losses::weighted_ce(&g, lp, &y, &d, norm));
            assert!((weighted - ref_nll(&lp_ref, &y, Some(&d), mean)).abs() <= TOL);
            let hard = value(&g, losses::hard_region_adv(&g, g.constant(scores.clone()), &y, norm));
            assert!((hard - ref_hard(&scores, &y, mean)).abs() <= TOL);
        }
    }
}

#[test]
fn uniform_prediction_costs_ln_l() {
    for l in 2..8 {
        let g = Graph::new();
        let lp = g.log_softmax_channels(g.constant(Tensor::zeros(&[2, l, 3, 3])));
        let y: Vec<u8> = (0..18).map(|i| (i % l) as u8 + 1).collect();
        let v = value(&g, losses::plain_ce(&g, lp, &y, Normalization::Mean));
        assert!((v - (l as f64).ln()).abs() < 1e-12);
        let p = g.constant(Tensor::full(&[2, l, 3, 3], 1.0 / l as f64));
        assert!((value(&g, losses::sc_loss(&g, p, &y)) - (l as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn unit_ambivalence_reduces_weighted_to_plain() {
    let mut r = rng(13);
    for _ in 0..CASES {
        let (b, l, h, w) = dims(&mut r);
        let logits = random_tensor(&mut r, &[b, l, h, w], 2.0);
        let y = random_labels(&mut r, b * h * w, l, 0.3);
        let ones = vec![1.0; b * h * w];
        let g = Graph::new();
        let lp = g.log_softmax_channels(g.constant(logits));
        let a = value(&g, losses::plain_ce(&g, lp, &y, Normalization::Mean));
        let c = value(&g, losses::weighted_ce(&g, lp, &y, &ones, Normalization::Mean));
        assert_eq!(a, c);
    }
}

#[test]
fn empty_hard_region_is_zero() {
    let mut r = rng(14);
    for _ in 0..CASES {
        let (b, l, h, w) = dims(&mut r);
        let y = random_labels(&mut r, b * h * w, l, 0.0);
        let scores = random_scores(&mut r, &[b, 1, h, w]);
        let g = Graph::new();
        assert_eq!(value(&g, losses::hard_region_adv(&g, g.constant(scores), &y, Normalization::Mean)), 0.0);
    }
}

#[test]
fn translator_objective_spot_value() {
    // D(real)=D(fake)=0.5, true-class probability 0.5 twice, uniform 19-way
    // segmentation, weight 5.
    let g = Graph::new();
    let half = g.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
    let cgan = value(&g, losses::cgan_loss(&g, half, half));
    let rows = g.constant(Tensor::from_vec(&[1, 2], vec![0.5, 0.5]));
    let cls = value(&g, losses::cls_loss(&g, rows, &[0], rows, &[1]));
    let p = g.constant(Tensor::full(&[1, 19, 2, 2], 1.0 / 19.0));
    let sc = value(&g, losses::sc_loss(&g, p, &[1, 2, 3, 4]));
    let total = losses::cgst_objective_value(cgan, cls, sc, 5.0);
    assert!((cgan - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    assert!((cls - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((total - 14.7221).abs() < 1e-4);
}

#[test]
fn all_ignore_labels_give_zero_supervision() {
    let g = Graph::new();
    let lp = g.log_softmax_channels(g.constant(Tensor::zeros(&[1, 3, 2, 2])));
    assert_eq!(value(&g, losses::plain_ce(&g, lp, &[0, 0, 0, 0], Normalization::Mean)), 0.0);
}
