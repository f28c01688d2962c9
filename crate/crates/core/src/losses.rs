//! Loss terms of the pipeline, expressed as graph ops.
//!
//! Score-space functions take squashed discriminator outputs in (0, 1) and
//! clamp at [`EPS`]; the `*_logits` twins compute the same quantity from
//! raw logits through a stable log-sigmoid and are what training uses.

use dcaa_autograd::{Graph, Tensor, Var};

/// Clamp applied before every logarithm of a probability or score.
pub const EPS: f64 = 1e-7;

/// Per-pixel normalisation of the supervised terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the number of contributing pixels.
    #[default]
    Mean,
    /// Raw sum over pixels.
    Sum,
}

fn log_score(g: &Graph, s: Var) -> Var {
    g.log_clamped(s, EPS)
}

fn log_one_minus(g: &Graph, s: Var) -> Var {
    g.log_clamped(g.add_scalar(g.scale(s, -1.0), 1.0), EPS)
}

/// `mean log D(real) + mean log(1 - D(fake))`, the quantity the
/// discriminator ascends.
pub fn cgan_loss(g: &Graph, real_scores: Var, fake_scores: Var) -> Var {
    g.add(g.mean(log_score(g, real_scores)), g.mean(log_one_minus(g, fake_scores)))
}

/// [`cgan_loss`] from realism logits.
pub fn cgan_loss_logits(g: &Graph, real_logits: Var, fake_logits: Var) -> Var {
    let fake_neg = g.log_sigmoid(g.scale(fake_logits, -1.0));
    g.add(g.mean(g.log_sigmoid(real_logits)), g.mean(fake_neg))
}

/// Non-saturating generator surrogate `-mean log D(fake)`.
pub fn generator_adv_loss_logits(g: &Graph, fake_logits: Var) -> Var {
    g.scale(g.mean(g.log_sigmoid(fake_logits)), -1.0)
}

/// Binary cross-entropy of logits against a constant target in {0, 1},
/// averaged over all elements.
pub fn bce_logits(g: &Graph, logits: Var, target: f64) -> Var {
    let pos = g.log_sigmoid(logits);
    let neg = g.log_sigmoid(g.scale(logits, -1.0));
    let t = g.add(g.scale(pos, target), g.scale(neg, 1.0 - target));
    g.scale(g.mean(t), -1.0)
}

/// `mean_b -log probs[b, cond_b]` for per-image simplices `probs[B, K]`.
pub fn condition_nll(g: &Graph, probs: Var, conds: &[usize]) -> Var {
    let shape = g.shape(probs);
    let (b, k) = (shape[0], shape[1]);
    assert_eq!(conds.len(), b, "one condition per image");
    let mut sel = vec![0.0; b * k];
    for (i, &c) in conds.iter().enumerate() {
        assert!(c < k, "condition {c} out of range for {k}");
        sel[i * k + c] = 1.0 / b as f64;
    }
    let picked = g.mul_const(log_score(g, probs), Tensor::from_vec(&[b, k], sel));
    g.scale(g.sum(picked), -1.0)
}

/// Auxiliary condition-classification loss: true condition of real target
/// images plus injected condition of translated images.
pub fn cls_loss(g: &Graph, real_probs: Var, real_conds: &[usize], fake_probs: Var, fake_conds: &[usize]) -> Var {
    g.add(condition_nll(g, real_probs, real_conds), condition_nll(g, fake_probs, fake_conds))
}

/// Masked negative log-likelihood over log-probabilities `[B, L, H, W]`.
/// Pixels labelled 0 are excluded; `weights` (one per pixel) scales each
/// term. Returns a constant 0 when no pixel is labelled.
pub fn masked_nll(g: &Graph, log_probs: Var, labels: &[u8], weights: Option<&[f64]>, norm: Normalization) -> Var {
    let count = labels.iter().filter(|&&l| l != 0).count();
    if count == 0 {
        log::warn!("no labelled pixels; supervised term is zero");
        return g.constant(Tensor::scalar(0.0));
    }
    let shape = g.shape(log_probs);
    let denom = match norm {
        Normalization::Mean => count as f64,
        Normalization::Sum => 1.0,
    };
    let picked = g.pick_labels(log_probs, labels);
    let mut coef = vec![0.0; labels.len()];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            coef[i] = -weights.map_or(1.0, |w| w[i]) / denom;
        }
    }
    if let Some(w) = weights {
        assert_eq!(w.len(), labels.len(), "weight map does not match labels");
    }
    g.sum(g.mul_const(picked, Tensor::from_vec(&[shape[0], shape[2], shape[3]], coef)))
}

/// Cross-entropy of a probability map against labels (0 ignored).
pub fn sc_loss(g: &Graph, probs: Var, labels: &[u8]) -> Var {
    masked_nll(g, log_score(g, probs), labels, None, Normalization::Mean)
}

/// `L_cGAN + L_cls + lambda_sc * L_sc`.
pub fn cgst_objective(g: &Graph, cgan: Var, cls: Var, sc: Var, lambda_sc: f64) -> Var {
    g.add(g.add(cgan, cls), g.scale(sc, lambda_sc))
}

/// Scalar form of [`cgst_objective`].
pub fn cgst_objective_value(cgan: f64, cls: f64, sc: f64, lambda_sc: f64) -> f64 {
    cgan + cls + lambda_sc * sc
}

/// Condition-specific adversarial term: `-mean log D_CA(p_CA) - mean log
/// D_Ci(p_Ci)` for the active condition's discriminator scores.
pub fn csat_adv_loss(g: &Graph, ca_scores: Var, active_scores: Var) -> Var {
    let a = g.mean(log_score(g, ca_scores));
    let b = g.mean(log_score(g, active_scores));
    g.scale(g.add(a, b), -1.0)
}

/// [`csat_adv_loss`] from logits.
pub fn csat_adv_loss_logits(g: &Graph, ca_logits: Var, active_logits: Var) -> Var {
    let a = g.mean(g.log_sigmoid(ca_logits));
    let b = g.mean(g.log_sigmoid(active_logits));
    g.scale(g.add(a, b), -1.0)
}

/// Domain-classifier ablation: every condition discriminator contributes.
pub fn dat_loss(g: &Graph, ca_scores: Var, all_scores: &[Var]) -> Var {
    let mut acc = g.mean(log_score(g, ca_scores));
    for s in all_scores {
        acc = g.add(acc, g.mean(log_score(g, *s)));
    }
    g.scale(acc, -1.0)
}

/// [`dat_loss`] from logits.
pub fn dat_loss_logits(g: &Graph, ca_logits: Var, all_logits: &[Var]) -> Var {
    let mut acc = g.mean(g.log_sigmoid(ca_logits));
    for s in all_logits {
        acc = g.add(acc, g.mean(g.log_sigmoid(*s)));
    }
    g.scale(acc, -1.0)
}

/// `CE(p_CA, y) + CE(p_Ci, y)` over labelled pixels, from log-probabilities.
pub fn source_ce_loss(g: &Graph, ca_log_probs: Var, branch_log_probs: Option<Var>, labels: &[u8]) -> Var {
    let ca = masked_nll(g, ca_log_probs, labels, None, Normalization::Mean);
    match branch_log_probs {
        Some(b) => g.add(ca, masked_nll(g, b, labels, None, Normalization::Mean)),
        None => ca,
    }
}

/// Supervised CE on pseudo-labels, from log-probabilities.
pub fn plain_ce(g: &Graph, log_probs: Var, pseudo: &[u8], norm: Normalization) -> Var {
    masked_nll(g, log_probs, pseudo, None, norm)
}

/// Pseudo-label CE weighted per pixel by the ambivalence map `d`.
pub fn weighted_ce(g: &Graph, log_probs: Var, pseudo: &[u8], d: &[f64], norm: Normalization) -> Var {
    masked_nll(g, log_probs, pseudo, Some(d), norm)
}

/// `-mean_{y = 0} log D_CA` for discriminator scores `[B, 1, H, W]`
/// already aligned with the pseudo-label map.
pub fn hard_region_adv(g: &Graph, scores: Var, pseudo: &[u8], norm: Normalization) -> Var {
    let count = pseudo.iter().filter(|&&l| l == 0).count();
    if count == 0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let denom = match norm {
        Normalization::Mean => count as f64,
        Normalization::Sum => 1.0,
    };
    let shape = g.shape(scores);
    let mask: Vec<f64> = pseudo.iter().map(|&l| if l == 0 { -1.0 / denom } else { 0.0 }).collect();
    assert_eq!(mask.len(), shape.iter().product::<usize>(), "score grid does not match labels");
    g.sum(g.mul_const(log_score(g, scores), Tensor::from_vec(&shape, mask)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn val(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn logit_forms_match_score_forms() {
        let g = Graph::new();
        let lr = Tensor::from_vec(&[1, 1, 2, 2], vec![0.3, -1.2, 2.0, 0.1]);
        let lf = Tensor::from_vec(&[1, 1, 2, 2], vec![-0.7, 0.4, 1.5, -2.2]);
        let (r, f) = (g.constant(lr), g.constant(lf));
        let (sr, sf) = (g.sigmoid(r), g.sigmoid(f));
        let a = val(&g, cgan_loss(&g, sr, sf));
        let b = val(&g, cgan_loss_logits(&g, r, f));
        assert!((a - b).abs() < 1e-12);
        let a = val(&g, csat_adv_loss(&g, sr, sf));
        let b = val(&g, csat_adv_loss_logits(&g, r, f));
        assert!((a - b).abs() < 1e-12);
        let a = val(&g, dat_loss(&g, sr, &[sf, sr]));
        let b = val(&g, dat_loss_logits(&g, r, &[f, r]));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_and_swapped() {
        let g = Graph::new();
        let big = g.constant(Tensor::full(&[1, 1, 2, 2], 20.0));
        assert!(val(&g, bce_logits(&g, big, 1.0)) < 1e-8);
        assert!(val(&g, bce_logits(&g, big, 0.0)) >= 5.0);
    }

    #[test]
    fn objective_is_linear() {
        let (cgan, cls, sc) = (2.0 * 0.5f64.ln(), 2.0 * 2f64.ln(), 19f64.ln());
        assert!((cgst_objective_value(cgan, cls, sc, 5.0) - 14.7221).abs() < 1e-4);
        assert_eq!(cgst_objective_value(0.2, 0.7, 9.0, 0.0), 0.2 + 0.7);
    }

    #[test]
    fn sum_normalisation_scales_by_count() {
        let g = Graph::new();
        let lp = g.constant(Tensor::full(&[1, 2, 1, 3], 0.5f64.ln()));
        let labels = [1u8, 0, 2];
        let m = val(&g, plain_ce(&g, lp, &labels, Normalization::Mean));
        let s = val(&g, plain_ce(&g, lp, &labels, Normalization::Sum));
        assert!((s - 2.0 * m).abs() < 1e-12);
    }
}
