//! Small controlled training experiments: discriminator capacity, optimizer
//! isolation and robustness of the weighted target loss to label noise.

mod common;

use common::*;
use dcaa_autograd::{Graph, Tensor};
use dcaa_core::adversarial::{self, BankArch, DetachedMaps, DiscBank};
use dcaa_core::config::{AdvMode, DiscConfig, SgdConfig};
use dcaa_core::losses::{self, Normalization};
use dcaa_core::segnet::{SegConfig, SegNet, Variant};
use dcaa_core::toyworld::{generate_scene, Domain, SceneSpec};
use rand::Rng;

fn maps(r: &mut rand_chacha::ChaCha8Rng, temp: f64) -> Tensor {
    random_simplex(r, 4, 3, 8, 8, temp)
}

#[test]
fn discriminator_separates_sharp_from_soft_maps_in_200_steps() {
    let mut bank = DiscBank::new(BankArch::for_variant(Variant::Mix, 3, 2, [8, 16, 16]), 1);
    let mut opt = adversarial::adam_for(&bank.store, &DiscConfig { lr: 1e-3, ..Default::default() });
    let mut r = rng(2);
    let wrap = |t: Tensor| DetachedMaps {
        main: Some(t),
        branches: vec![None, None],
    };
    for _ in 0..200 {
        let s = wrap(maps(&mut r, 4.0));
        let t = wrap(maps(&mut r, 0.3));
        adversarial::discriminator_step(&mut bank, &mut opt, 1e-3, &s, &t, 0, AdvMode::Csat).unwrap();
    }
    let g = Graph::new();
    let scope = dcaa_autograd::Scope::frozen(&g, &bank.store);
    let (s, t) = (maps(&mut r, 4.0), maps(&mut r, 0.3));
    let ls = g.value(bank.ca_logits(scope, g.constant(s)).unwrap());
    let lt = g.value(bank.ca_logits(scope, g.constant(t)).unwrap());
    let acc = (ls.data().iter().filter(|&&v| v > 0.0).count() + lt.data().iter().filter(|&&v| v < 0.0).count()) as f64
        / (ls.numel() + lt.numel()) as f64;
    assert!(acc >= 0.95, "held-out patch accuracy {acc}");
}

#[test]
fn segmenter_and_discriminator_updates_are_isolated() {
    let mut cfg = SegConfig::new(Variant::Cam, 3, 2);
    cfg.enc_channels = [4, 4];
    cfg.feat_dim = 4;
    cfg.att_hidden = 4;
    let mut net = SegNet::new(cfg, 3).unwrap();
    let mut bank = DiscBank::new(BankArch::for_variant(Variant::Cam, 3, 2, [4, 4, 4]), 4);
    let mut r = rng(5);
    let xs = random_scores(&mut r, &[2, 3, 16, 16]);
    let xt = random_scores(&mut r, &[2, 3, 16, 16]);
    let y = random_labels(&mut r, 2 * 256, 3, 0.1);

    let (seg0, bank0) = (net.store.checksum(), bank.store.checksum());
    let g = Graph::new();
    let bs = net.forward(&g, g.constant(xs.clone()), true, None).unwrap();
    let bt = net.forward(&g, g.constant(xt.clone()), true, None).unwrap();
    let ce = adversarial::source_ce(&g, &bs, 0, &y, 16, 16, true).unwrap();
    let adv = adversarial::seg_adv_loss(&g, &bank, &bt, 0, AdvMode::Csat).unwrap().unwrap();
    let loss = g.add(ce, g.scale(adv, 0.001));
    let mut sgd = adversarial::sgd_for(&net.store, &SgdConfig::default());
    adversarial::seg_update(&g, loss, &mut net, &mut sgd, 0.01).unwrap();
    assert_ne!(net.store.checksum(), seg0);
    assert_eq!(bank.store.checksum(), bank0, "segmenter step touched the discriminators");

    let seg1 = net.store.checksum();
    let g = Graph::new();
    let bs = net.forward(&g, g.constant(xs), false, None).unwrap();
    let bt = net.forward(&g, g.constant(xt), false, None).unwrap();
    let mut adam = adversarial::adam_for(&bank.store, &DiscConfig::default());
    adversarial::discriminator_step(&mut bank, &mut adam, 1e-3, &DetachedMaps::of(&g, &bs), &DetachedMaps::of(&g, &bt), 0, AdvMode::Csat)
        .unwrap();
    assert_ne!(bank.store.checksum(), bank0);
    assert_eq!(net.store.checksum(), seg1, "discriminator step touched the segmenter");
}

/// Trains two identical single-head models on pseudo-labels with 30% of
/// them flipped; one down-weights flipped pixels (weight 1e-3), the other
/// treats every label alike. Returns clean held-out CE for each.
fn noisy_label_run(seed: u64) -> (f64, f64) {
    let spec = SceneSpec {
        height: 16,
        width: 16,
        num_classes: 4,
        domain: Domain::Source,
        ..Default::default()
    };
    let scenes: Vec<_> = (0..48).map(|i| generate_scene(seed * 1000 + i, &spec).unwrap()).collect();
    let (train, held) = scenes.split_at(32);
    let mut r = rng(seed);
    let mut noisy = Vec::new();
    let mut weights = Vec::new();
    for s in train {
        let mut y = s.label.clone();
        let mut w = vec![1.0; y.len()];
        for (yi, wi) in y.iter_mut().zip(w.iter_mut()) {
            if *yi != 0 && r.random::<f64>() < 0.3 {
                let shift = r.random_range(1..4) as u8;
                *yi = (*yi - 1 + shift) % 4 + 1;
                *wi = 1e-3;
            }
        }
        noisy.push(y);
        weights.push(w);
    }
    let mut cfg = SegConfig::new(Variant::Mix, 4, 2);
    cfg.enc_channels = [8, 8];
    cfg.feat_dim = 8;
    let stack = |idx: &[usize], src: &[dcaa_core::toyworld::Sample]| -> Tensor {
        Tensor::stack_batch(&idx.iter().map(|&i| src[i].image.clone()).collect::<Vec<_>>()).reshape(&[idx.len(), 3, 16, 16])
    };
    let mut results = Vec::new();
    for weighted in [true, false] {
        let mut net = SegNet::new(cfg.clone(), seed + 17).unwrap();
        let mut sgd = adversarial::sgd_for(&net.store, &SgdConfig::default());
        for step in 0..300 {
            let idx: Vec<usize> = (0..4).map(|j| (step * 4 + j) % train.len()).collect();
            let x = stack(&idx, train);
            let y: Vec<u8> = idx.iter().flat_map(|&i| noisy[i].iter().copied()).collect();
            let w: Vec<f64> = idx.iter().flat_map(|&i| weights[i].iter().copied()).collect();
            let g = Graph::new();
            let b = net.forward(&g, g.constant(x), true, None).unwrap();
            let lp = b.main.unwrap().log_probs_at(&g, 16, 16);
            let loss = if weighted {
                losses::weighted_ce(&g, lp, &y, &w, Normalization::Mean)
            } else {
                losses::plain_ce(&g, lp, &y, Normalization::Mean)
            };
            adversarial::seg_update(&g, loss, &mut net, &mut sgd, 0.02).unwrap();
        }
        let idx: Vec<usize> = (0..held.len()).collect();
        let g = Graph::new();
        let b = net.forward(&g, g.constant(stack(&idx, held)), false, None).unwrap();
        let y: Vec<u8> = held.iter().flat_map(|s| s.label.iter().copied()).collect();
        let lp = b.main.unwrap().log_probs_at(&g, 16, 16);
        results.push(value(&g, losses::plain_ce(&g, lp, &y, Normalization::Mean)));
    }
    (results[0], results[1])
}

#[test]
fn ambivalence_weighting_suppresses_label_noise() {
    for seed in [1, 2] {
        let (weighted, plain) = noisy_label_run(seed);
        eprintln!("seed {seed}: weighted {weighted:.4} plain {plain:.4}");
        assert!(weighted <= plain, "weighted {weighted} > plain {plain}");
    }
}
