//! Self-training: attentive pseudo-labels from a frozen teacher, the
//! discriminator ambivalence map, the weighted and hard-region target
//! losses, and teacher-student distillation.

use dcaa_autograd::{Graph, Scope, Tensor, Var};

use crate::adversarial::{self, DetachedMaps, DiscBank};
use crate::config::{DistillConfig, PseudoMode, SourceHeads, Stage2Config, TargetLoss};
use crate::curves::Curves;
use crate::error::{Error, Result};
use crate::losses::{self, Normalization};
use crate::segnet::{self, renormalize, PredictionBundle, SegNet, Variant};
use crate::toyworld::{mix_seed, ConditionSampler, Dataset};

/// Teacher outputs for one target batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelPack {
    /// Fused probabilities at prediction resolution, `[B, L, h, w]`.
    pub fused_probs: Tensor,
    /// Pseudo-labels at input resolution, `[B * H * W]`, 0 = none.
    pub pseudo_labels: Vec<u8>,
    /// Ambivalence at prediction resolution, `[B, 1, h, w]`.
    pub ambivalence: Tensor,
    /// Pixels without a pseudo-label.
    pub hard_mask: Vec<bool>,
}

fn check_lambda(lambda_p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda_p) {
        return Err(Error::Invalid(format!("lambda_p {lambda_p} outside [0, 1)")));
    }
    Ok(())
}

/// Per pixel: the argmax class (1-based, ties to the lowest) if its
/// probability is strictly above `lambda_p`, otherwise 0.
pub fn threshold_labels(probs: &Tensor, lambda_p: f64) -> Result<Vec<u8>> {
    check_lambda(lambda_p)?;
    let (n, c, h, w) = probs.dims4();
    let hw = h * w;
    let d = probs.data();
    let mut out = vec![0u8; n * hw];
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if d[(b * c + ch) * hw + p] > d[(b * c + best) * hw + p] {
                    best = ch;
                }
            }
            if d[(b * c + best) * hw + p] > lambda_p {
                out[b * hw + p] = (best + 1) as u8;
            }
        }
    }
    Ok(out)
}

/// Attention-fused teacher probabilities at prediction resolution.
pub fn fused_probs(g: &Graph, bundle: &PredictionBundle) -> Result<Tensor> {
    if bundle.variant != Variant::Cam {
        return Err(Error::Invalid("attentive fusion needs the condition-attention model".into()));
    }
    let v = segnet::combine(g, bundle, segnet::PredictMode::Fused)?;
    Ok((*g.value(v)).clone())
}

/// Bilinear upsampling of a probability or score map without a tape.
pub fn upsample(t: &Tensor, h: usize, w: usize) -> Tensor {
    let g = Graph::new();
    let v = g.constant(t.clone());
    (*g.value(g.resize_bilinear(v, h, w))).clone()
}

/// Pseudo-labels at `[h, w]` from fused probabilities at prediction
/// resolution: upsample, renormalise, threshold.
pub fn assign_from_fused(fused: &Tensor, lambda_p: f64, h: usize, w: usize) -> Result<Vec<u8>> {
    threshold_labels(&renormalize(&upsample(fused, h, w)), lambda_p)
}

/// Baseline voting across the heads' probability maps.
pub fn baseline_labels(heads: &[Tensor], mode: PseudoMode, lambda_p: f64) -> Result<Vec<u8>> {
    check_lambda(lambda_p)?;
    let first = heads.first().ok_or_else(|| Error::Invalid("no heads to vote over".into()))?;
    let mut acc = first.clone();
    match mode {
        PseudoMode::MeanV => {
            for h in &heads[1..] {
                acc.add_assign(h);
            }
            let n = heads.len() as f64;
            acc = acc.map(|v| v / n);
        }
        PseudoMode::MaxV => {
            for h in &heads[1..] {
                acc = acc.zip_map(h, f64::max);
            }
            acc = renormalize(&acc);
        }
        PseudoMode::Apla => return Err(Error::Invalid("attentive assignment is not a voting baseline".into())),
    }
    threshold_labels(&acc, lambda_p)
}

/// `sigmoid(D_CA(p))` over the patch grid, upsampled to the spatial size of
/// `probs`.
pub fn ambivalence_map(probs: &Tensor, bank: &DiscBank) -> Result<Tensor> {
    let (_, _, h, w) = probs.dims4();
    let g = Graph::new();
    let logits = bank.ca_logits(Scope::frozen(&g, &bank.store), g.constant(probs.clone()))?;
    let d = g.resize_bilinear(g.sigmoid(logits), h, w);
    let t = (*g.value(d)).clone();
    if !t.is_finite() {
        return Err(Error::NonFinite("ambivalence map".into()));
    }
    Ok(t)
}

/// Frozen teacher: the stage-1 model and its discriminator bank.
pub struct Teacher<'a> {
    pub net: &'a SegNet,
    pub bank: Option<&'a DiscBank>,
}

impl Teacher<'_> {
    pub fn pack(&self, images: &Tensor, lambda_p: f64, mode: PseudoMode) -> Result<PseudoLabelPack> {
        let (_, _, h, w) = images.dims4();
        let g = Graph::new();
        let b = self.net.forward(&g, g.constant(images.clone()), false, None)?;
        let fused = fused_probs(&g, &b)?;
        let pseudo_labels = match mode {
            PseudoMode::Apla => assign_from_fused(&fused, lambda_p, h, w)?,
            PseudoMode::MaxV | PseudoMode::MeanV => {
                let mut heads: Vec<Tensor> = b
                    .branches
                    .iter()
                    .flatten()
                    .map(|hd| renormalize(&upsample(&g.value(hd.probs), h, w)))
                    .collect();
                if let Some(m) = b.main {
                    heads.push(renormalize(&upsample(&g.value(m.probs), h, w)));
                }
                baseline_labels(&heads, mode, lambda_p)?
            }
        };
        let ambivalence = match self.bank {
            Some(bank) => ambivalence_map(&fused, bank)?,
            None => {
                let (n, _, fh, fw) = fused.dims4();
                Tensor::ones(&[n, 1, fh, fw])
            }
        };
        let hard_mask = pseudo_labels.iter().map(|&l| l == 0).collect();
        Ok(PseudoLabelPack {
            fused_probs: fused,
            pseudo_labels,
            ambivalence,
            hard_mask,
        })
    }
}

/// Target-side stage-2 loss on the student's CA head: pseudo-label CE
/// (weighted or plain) plus `lambda_hard` times the hard-region term.
pub struct TargetTerms {
    pub ce: Var,
    pub hard: Option<Var>,
}

pub fn target_terms(
    g: &Graph,
    cfg: &Stage2Config,
    student: &PredictionBundle,
    bank: &DiscBank,
    pack: &PseudoLabelPack,
    h: usize,
    w: usize,
) -> Result<TargetTerms> {
    let ca = student
        .main
        .ok_or_else(|| Error::Invalid("stage 2 trains a model with a CA head".into()))?;
    let lp = ca.log_probs_at(g, h, w);
    let ce = match cfg.target_loss {
        TargetLoss::Plain => losses::plain_ce(g, lp, &pack.pseudo_labels, cfg.normalization),
        TargetLoss::Weighted => {
            let d = upsample(&pack.ambivalence, h, w);
            losses::weighted_ce(g, lp, &pack.pseudo_labels, d.data(), cfg.normalization)
        }
    };
    let hard = if cfg.hard_adv {
        let logits = bank.ca_logits(Scope::frozen(g, &bank.store), ca.probs)?;
        let scores = g.resize_bilinear(g.sigmoid(logits), h, w);
        Some(losses::hard_region_adv(g, scores, &pack.pseudo_labels, cfg.normalization))
    } else {
        None
    };
    Ok(TargetTerms { ce, hard })
}

/// Stage 2: the student (initialised from the teacher) learns from
/// stylised source labels plus teacher pseudo-labels on target. The
/// teacher and its bank stay frozen; `bank` (a copy of the teacher's)
/// keeps playing the adversarial game on the CA head.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    cfg: &Stage2Config,
    teacher: &Teacher<'_>,
    student: &mut SegNet,
    bank: &mut DiscBank,
    stylized: &Dataset,
    target: &Dataset,
    seed: u64,
    curves: &mut Curves,
) -> Result<()> {
    let k = student.cfg.num_conditions;
    let mut src = ConditionSampler::new(stylized.by_condition(), mix_seed(seed, 31, 0));
    let mut tgt = ConditionSampler::new(target.by_condition(), mix_seed(seed, 32, 0));
    let mut opt = adversarial::sgd_for(&student.store, &cfg.optim);
    let sched = adversarial::schedule(&cfg.optim, cfg.steps);
    let mut dopt = adversarial::adam_for(&bank.store, &cfg.disc);
    let teacher_sum = teacher.net.store.checksum();
    for step in 0..cfg.steps {
        let i = step % k;
        let sb = adversarial::draw(stylized, &mut src, i, cfg.batch)?;
        let tb = adversarial::draw(target, &mut tgt, i, cfg.batch)?;
        let (h, w) = sb.hw();
        let pack = teacher.pack(&tb.images, cfg.lambda_p, cfg.pseudo)?;
        let g = Graph::new();
        let bs = student.forward(&g, g.constant(sb.images.clone()), true, None)?;
        let src_ce = adversarial::source_ce(&g, &bs, i, &sb.labels, h, w, cfg.source_heads == SourceHeads::All)?;
        let bt = student.forward(&g, g.constant(tb.images.clone()), true, None)?;
        let terms = target_terms(&g, cfg, &bt, bank, &pack, h, w)?;
        let mut loss = g.add(src_ce, terms.ce);
        let mut hard_v = 0.0;
        if let Some(hd) = terms.hard {
            hard_v = g.value(hd).item();
            loss = g.add(loss, g.scale(hd, cfg.lambda_hard));
        }
        let (src_v, tgt_v) = (g.value(src_ce).item(), g.value(terms.ce).item());
        let ca_only = |b: &PredictionBundle| DetachedMaps {
            main: b.main.map(|m| (*g.value(m.probs)).clone()),
            branches: Vec::new(),
        };
        let (sm, tm) = (ca_only(&bs), ca_only(&bt));
        let total = adversarial::seg_update(&g, loss, student, &mut opt, sched.lr(step))
            .map_err(|e| Error::NonFinite(format!("stage-2 step {step}: {e}")))?;
        let d_v = if cfg.hard_adv {
            adversarial::discriminator_step(bank, &mut dopt, cfg.disc.lr, &sm, &tm, i, crate::config::AdvMode::Csat)?
        } else {
            0.0
        };
        if step % 10 == 0 || step + 1 == cfg.steps {
            let labelled = pack.pseudo_labels.iter().filter(|&&l| l != 0).count() as f64;
            curves.push(step, "source_ce", src_v);
            curves.push(step, "target_ce", tgt_v);
            curves.push(step, "hard_adv", hard_v);
            curves.push(step, "total", total);
            curves.push(step, "d_loss", d_v);
            curves.push(step, "pseudo_coverage", labelled / pack.pseudo_labels.len() as f64);
        }
        if step % 100 == 0 {
            log::info!("stage2 step {step}: src {src_v:.4} tgt {tgt_v:.4} hard {hard_v:.4}");
        }
    }
    if teacher.net.store.checksum() != teacher_sum {
        return Err(Error::Invalid("teacher parameters changed during stage 2".into()));
    }
    Ok(())
}

/// Builds the distillation student: a single-head model whose encoder is
/// copied from the teacher.
pub fn student_from(teacher: &SegNet, seed: u64) -> Result<SegNet> {
    let mut cfg = teacher.cfg.clone();
    cfg.variant = Variant::Mix;
    let mut s = SegNet::new(cfg, seed)?;
    s.store
        .copy_prefix(&teacher.store, "enc.", "enc.")
        .map_err(|e| Error::Invalid(format!("student encoder: {e}")))?;
    // decoder starts at the mean of the teacher's condition decoders
    let k = teacher.cfg.num_conditions;
    for id in s.store.ids().collect::<Vec<_>>() {
        let Some(rest) = s.store.name(id).strip_prefix("dec.").map(str::to_string) else {
            continue;
        };
        let mut acc: Option<Tensor> = None;
        for i in 0..k {
            let Some(src) = teacher.store.find(&format!("dec{i}.{rest}")) else {
                return Ok(s);
            };
            match acc.as_mut() {
                Some(a) => a.add_assign(teacher.store.get(src)),
                None => acc = Some(teacher.store.get(src).clone()),
            }
        }
        if let Some(a) = acc {
            *s.store.get_mut(id) = a.map(|v| v / k as f64);
        }
    }
    Ok(s)
}

/// Trains the student on stylised source labels plus the teacher's
/// attentive pseudo-labels at `cfg.lambda_p` with plain CE.
pub fn distill_student(
    cfg: &DistillConfig,
    teacher: &SegNet,
    student: &mut SegNet,
    stylized: &Dataset,
    target: &Dataset,
    seed: u64,
    curves: &mut Curves,
) -> Result<()> {
    let k = teacher.cfg.num_conditions;
    let mut src = ConditionSampler::new(stylized.by_condition(), mix_seed(seed, 41, 0));
    let mut tgt = ConditionSampler::new(target.by_condition(), mix_seed(seed, 42, 0));
    let mut opt = adversarial::sgd_for(&student.store, &cfg.optim);
    let sched = adversarial::schedule(&cfg.optim, cfg.steps);
    let t = Teacher { net: teacher, bank: None };
    let before = teacher.store.checksum();
    for step in 0..cfg.steps {
        let i = step % k;
        let sb = adversarial::draw(stylized, &mut src, i, cfg.batch)?;
        let tb = adversarial::draw(target, &mut tgt, i, cfg.batch)?;
        let (h, w) = sb.hw();
        let pack = t.pack(&tb.images, cfg.lambda_p, PseudoMode::Apla)?;
        let g = Graph::new();
        let bs = student.forward(&g, g.constant(sb.images.clone()), true, None)?;
        let bt = student.forward(&g, g.constant(tb.images.clone()), true, None)?;
        let (ms, mt) = (bs.main.expect("mix head"), bt.main.expect("mix head"));
        let src_ce = losses::masked_nll(&g, ms.log_probs_at(&g, h, w), &sb.labels, None, Normalization::Mean);
        let tgt_ce = losses::plain_ce(&g, mt.log_probs_at(&g, h, w), &pack.pseudo_labels, Normalization::Mean);
        let loss = g.add(src_ce, tgt_ce);
        let (sv, tv) = (g.value(src_ce).item(), g.value(tgt_ce).item());
        adversarial::seg_update(&g, loss, student, &mut opt, sched.lr(step))
            .map_err(|e| Error::NonFinite(format!("distill step {step}: {e}")))?;
        if step % 10 == 0 || step + 1 == cfg.steps {
            curves.push(step, "source_ce", sv);
            curves.push(step, "target_ce", tv);
        }
    }
    if teacher.store.checksum() != before {
        return Err(Error::Invalid("teacher parameters changed during distillation".into()));
    }
    Ok(())
}
