//! Output-space adversarial alignment: patch discriminators over
//! probability maps, the condition-specific and domain-classifier
//! adversarial objectives, and the stage-1 training loop.

use dcaa_autograd::{clip_grad_norm, Adam, Conv2d, Graph, ParamStore, PolySchedule, Scope, Sgd, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AdvMode, DiscConfig, SgdConfig, Stage1Config};
use crate::curves::Curves;
use crate::error::{Error, Result};
use crate::losses::{self, Normalization};
use crate::segnet::{HeadOut, PredictionBundle, SegNet, Variant};
use crate::toyworld::{mix_seed, Batch, ConditionSampler, Dataset};

/// Gradient-norm ceiling applied to segmenter updates.
pub const SEG_CLIP: f64 = 10.0;

/// Four-layer patch CNN over an `L`-channel probability map, emitting a
/// grid of logits for "this map comes from the source domain".
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    out: Conv2d,
}

impl PatchDiscriminator {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, ch: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        PatchDiscriminator {
            c1: Conv2d::new(store, &format!("{name}.c1"), in_ch, ch[0], 3, 2, rng),
            c2: Conv2d::new(store, &format!("{name}.c2"), ch[0], ch[1], 3, 2, rng),
            c3: Conv2d::new(store, &format!("{name}.c3"), ch[1], ch[2], 3, 1, rng),
            out: Conv2d::new(store, &format!("{name}.out"), ch[2], 1, 3, 1, rng),
        }
    }

    pub fn logits(&self, s: Scope<'_>, probs: Var) -> Var {
        let g = s.g;
        let h = g.leaky_relu(self.c1.forward(s, probs), 0.2);
        let h = g.leaky_relu(self.c2.forward(s, h), 0.2);
        let h = g.leaky_relu(self.c3.forward(s, h), 0.2);
        self.out.forward(s, h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankArch {
    pub num_classes: usize,
    pub num_conditions: usize,
    pub channels: [usize; 3],
    /// Whether the bank has the global (CA / single-head) discriminator.
    pub with_ca: bool,
    /// Whether the bank has per-condition discriminators.
    pub with_conditions: bool,
}

impl BankArch {
    pub fn for_variant(variant: Variant, num_classes: usize, num_conditions: usize, channels: [usize; 3]) -> Self {
        BankArch {
            num_classes,
            num_conditions,
            channels,
            with_ca: variant.has_main(),
            with_conditions: variant.has_branches(),
        }
    }
}

/// `D^CA` plus one `D^{C_i}` per condition, in one parameter store.
#[derive(Clone, Debug)]
pub struct DiscBank {
    pub arch: BankArch,
    pub store: ParamStore,
    pub ca: Option<PatchDiscriminator>,
    pub conds: Vec<PatchDiscriminator>,
}

impl DiscBank {
    pub fn new(arch: BankArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = arch.num_classes;
        let ca = arch
            .with_ca
            .then(|| PatchDiscriminator::new(&mut store, "dca", l, arch.channels, &mut rng));
        let conds = if arch.with_conditions {
            (0..arch.num_conditions)
                .map(|i| PatchDiscriminator::new(&mut store, &format!("dc{i}"), l, arch.channels, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        DiscBank { arch, store, ca, conds }
    }

    pub fn from_store(arch: BankArch, store: &ParamStore) -> Result<Self> {
        let mut b = DiscBank::new(arch, 0);
        b.store
            .load_from(store)
            .map_err(|e| Error::Invalid(format!("discriminator bank: {e}")))?;
        Ok(b)
    }

    fn ca_disc(&self) -> Result<&PatchDiscriminator> {
        self.ca
            .as_ref()
            .ok_or_else(|| Error::Invalid("bank has no CA discriminator".into()))
    }

    fn cond_disc(&self, i: usize) -> Result<&PatchDiscriminator> {
        self.conds.get(i).ok_or(Error::ConditionRange {
            index: i,
            count: self.conds.len(),
        })
    }

    pub fn ca_logits(&self, s: Scope<'_>, probs: Var) -> Result<Var> {
        Ok(self.ca_disc()?.logits(s, probs))
    }

    pub fn cond_logits(&self, s: Scope<'_>, i: usize, probs: Var) -> Result<Var> {
        Ok(self.cond_disc(i)?.logits(s, probs))
    }
}

/// The heads of a bundle the adversarial game looks at for condition `i`:
/// the global head (if any) and branch `i` (if any).
pub fn active_heads(b: &PredictionBundle, i: usize) -> (Option<HeadOut>, Option<HeadOut>) {
    (b.main, b.branch(i).copied())
}

/// Segmenter-side adversarial term on a target bundle of condition `i`.
pub fn seg_adv_loss(g: &Graph, bank: &DiscBank, b: &PredictionBundle, i: usize, mode: AdvMode) -> Result<Option<Var>> {
    let s = Scope::frozen(g, &bank.store);
    let mut terms = Vec::new();
    if let (Some(m), true) = (b.main, bank.ca.is_some()) {
        terms.push(bank.ca_logits(s, m.probs)?);
    }
    match mode {
        AdvMode::None => return Ok(None),
        AdvMode::Csat => {
            if let Some(h) = b.branch(i) {
                terms.push(bank.cond_logits(s, i, h.probs)?);
            }
        }
        AdvMode::Dat => {
            for (j, h) in b.branches.iter().enumerate() {
                if let Some(h) = h {
                    terms.push(bank.cond_logits(s, j, h.probs)?);
                }
            }
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let mut acc = g.mean(g.log_sigmoid(terms[0]));
    for t in &terms[1..] {
        acc = g.add(acc, g.mean(g.log_sigmoid(*t)));
    }
    Ok(Some(g.scale(acc, -1.0)))
}

/// Supervised term on a (stylised) source bundle of condition `i`: the
/// global head plus the active branch.
pub fn source_ce(g: &Graph, b: &PredictionBundle, i: usize, labels: &[u8], h: usize, w: usize, branch: bool) -> Result<Var> {
    let (main, br) = active_heads(b, i);
    let br = if branch || main.is_none() { br } else { None };
    let mut acc: Option<Var> = None;
    for head in [main, br].into_iter().flatten() {
        let t = losses::masked_nll(g, head.log_probs_at(g, h, w), labels, None, Normalization::Mean);
        acc = Some(match acc {
            Some(a) => g.add(a, t),
            None => t,
        });
    }
    acc.ok_or_else(|| Error::Invalid(format!("bundle has no head for condition {i}")))
}

/// Detached probability maps from a bundle, for discriminator updates.
pub struct DetachedMaps {
    pub main: Option<Tensor>,
    pub branches: Vec<Option<Tensor>>,
}

impl DetachedMaps {
    pub fn of(g: &Graph, b: &PredictionBundle) -> Self {
        DetachedMaps {
            main: b.main.map(|m| (*g.value(m.probs)).clone()),
            branches: b.branches.iter().map(|h| h.map(|h| (*g.value(h.probs)).clone())).collect(),
        }
    }
}

/// One BCE update of every discriminator that has data: source maps are
/// labelled 1, target maps 0. `D^{C_i}` sees only condition `i` under
/// CSAT; under DAT every condition discriminator sees its branch.
pub fn discriminator_step(
    bank: &mut DiscBank,
    opt: &mut Adam,
    lr: f64,
    source: &DetachedMaps,
    target: &DetachedMaps,
    cond: usize,
    mode: AdvMode,
) -> Result<f64> {
    let g = Graph::new();
    let s = Scope::new(&g, &bank.store, true);
    let mut terms = Vec::new();
    if let (Some(ms), Some(mt), true) = (&source.main, &target.main, bank.ca.is_some()) {
        let ls = bank.ca_logits(s, g.constant(ms.clone()))?;
        let lt = bank.ca_logits(s, g.constant(mt.clone()))?;
        terms.push(g.add(losses::bce_logits(&g, ls, 1.0), losses::bce_logits(&g, lt, 0.0)));
    }
    let which: Vec<usize> = match mode {
        AdvMode::None => return Ok(0.0),
        AdvMode::Csat => vec![cond],
        AdvMode::Dat => (0..bank.conds.len()).collect(),
    };
    for j in which {
        if j >= bank.conds.len() {
            continue;
        }
        match (source.branches.get(j).cloned().flatten(), target.branches.get(j).cloned().flatten()) {
            (Some(ps), Some(pt)) => {
                let ls = bank.cond_logits(s, j, g.constant(ps))?;
                let lt = bank.cond_logits(s, j, g.constant(pt))?;
                terms.push(g.add(losses::bce_logits(&g, ls, 1.0), losses::bce_logits(&g, lt, 0.0)));
            }
            _ => log::debug!("no maps for discriminator {j} this step; skipped"),
        }
    }
    if terms.is_empty() {
        return Ok(0.0);
    }
    let mut loss = terms[0];
    for t in &terms[1..] {
        loss = g.add(loss, *t);
    }
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("discriminator loss".into()));
    }
    let grads = g.backward(loss).for_store(&bank.store);
    opt.step(&mut bank.store, &grads, lr);
    Ok(v)
}

pub fn sgd_for(store: &ParamStore, cfg: &SgdConfig) -> Sgd {
    Sgd::new(store, cfg.momentum, cfg.weight_decay)
}

pub fn schedule(cfg: &SgdConfig, steps: usize) -> PolySchedule {
    PolySchedule {
        base_lr: cfg.lr,
        total_steps: steps,
        power: cfg.power,
    }
}

pub fn adam_for(store: &ParamStore, cfg: &DiscConfig) -> Adam {
    Adam::new(store, cfg.beta1, cfg.beta2)
}

/// Draws one batch of `n` images of condition `c`.
pub fn draw(ds: &Dataset, sampler: &mut ConditionSampler, c: usize, n: usize) -> Result<Batch> {
    let idx = sampler
        .next(c, n)
        .ok_or_else(|| Error::Invalid(format!("{}: no images for condition {c}", ds.manifest.name)))?;
    Ok(ds.batch_of(&idx))
}

/// Applies one SGD update from `loss`, clipping the gradient norm.
pub fn seg_update(g: &Graph, loss: Var, net: &mut SegNet, opt: &mut Sgd, lr: f64) -> Result<f64> {
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("segmentation loss".into()));
    }
    let mut grads = g.backward(loss).for_store(&net.store);
    clip_grad_norm(&mut grads, SEG_CLIP);
    opt.step(&mut net.store, &grads, lr);
    Ok(v)
}

/// Stage 1: supervised loss on stylised source plus `lambda_adv` times the
/// adversarial loss on target, alternating with discriminator updates.
/// Conditions are visited round-robin, one source and one target batch per
/// step.
pub fn train_stage1(
    cfg: &Stage1Config,
    net: &mut SegNet,
    bank: &mut DiscBank,
    stylized: &Dataset,
    target: &Dataset,
    seed: u64,
    curves: &mut Curves,
) -> Result<()> {
    let k = net.cfg.num_conditions;
    let mut src = ConditionSampler::new(stylized.by_condition(), mix_seed(seed, 21, 0));
    let mut tgt = ConditionSampler::new(target.by_condition(), mix_seed(seed, 22, 0));
    let mut opt = sgd_for(&net.store, &cfg.optim);
    let sched = schedule(&cfg.optim, cfg.steps);
    let mut dopt = adam_for(&bank.store, &cfg.disc);
    let route_branch = net.variant() != Variant::Cam;
    for step in 0..cfg.steps {
        let i = step % k;
        let sb = draw(stylized, &mut src, i, cfg.batch)?;
        let tb = draw(target, &mut tgt, i, cfg.batch)?;
        let (h, w) = sb.hw();
        let route = route_branch.then_some(i);
        let g = Graph::new();
        let bs = net.forward(&g, g.constant(sb.images.clone()), true, route)?;
        let ce = source_ce(&g, &bs, i, &sb.labels, h, w, true)?;
        let mut loss = ce;
        let mut adv_v = 0.0;
        let mut target_maps = None;
        if cfg.adv != AdvMode::None {
            let bt = net.forward(&g, g.constant(tb.images.clone()), true, route)?;
            if let Some(adv) = seg_adv_loss(&g, bank, &bt, i, cfg.adv)? {
                adv_v = g.value(adv).item();
                loss = g.add(loss, g.scale(adv, cfg.lambda_adv));
            }
            target_maps = Some(DetachedMaps::of(&g, &bt));
        }
        let source_maps = DetachedMaps::of(&g, &bs);
        let ce_v = g.value(ce).item();
        let total = seg_update(&g, loss, net, &mut opt, sched.lr(step))
            .map_err(|e| Error::NonFinite(format!("stage-1 step {step}: {e}")))?;
        let d_v = match target_maps {
            Some(tm) => discriminator_step(bank, &mut dopt, cfg.disc.lr, &source_maps, &tm, i, cfg.adv)?,
            None => 0.0,
        };
        if step % 10 == 0 || step + 1 == cfg.steps {
            curves.push(step, "seg_ce", ce_v);
            curves.push(step, "seg_adv", adv_v);
            curves.push(step, "seg_total", total);
            curves.push(step, "d_loss", d_v);
            curves.push(step, "lr", sched.lr(step));
        }
        if step % 100 == 0 {
            log::info!("stage1 step {step}: ce {ce_v:.4} adv {adv_v:.4} d {d_v:.4}");
        }
    }
    Ok(())
}

/// Supervised training of a single-head segmenter on labelled source.
pub fn train_supervised(
    optim: &SgdConfig,
    steps: usize,
    batch: usize,
    net: &mut SegNet,
    data: &Dataset,
    seed: u64,
    curves: &mut Curves,
) -> Result<()> {
    let mut sampler = ConditionSampler::new(vec![(0..data.len()).collect()], mix_seed(seed, 20, 0));
    let mut opt = sgd_for(&net.store, optim);
    let sched = schedule(optim, steps);
    for step in 0..steps {
        let b = draw(data, &mut sampler, 0, batch)?;
        let (h, w) = b.hw();
        let g = Graph::new();
        let bundle = net.forward(&g, g.constant(b.images.clone()), true, None)?;
        let main = bundle
            .main
            .ok_or_else(|| Error::Invalid("supervised source training needs a single-head model".into()))?;
        let loss = losses::masked_nll(&g, main.log_probs_at(&g, h, w), &b.labels, None, Normalization::Mean);
        let v = seg_update(&g, loss, net, &mut opt, sched.lr(step))
            .map_err(|e| Error::NonFinite(format!("source step {step}: {e}")))?;
        if step % 10 == 0 || step + 1 == steps {
            curves.push(step, "ce", v);
        }
        if step % 100 == 0 {
            log::info!("source step {step}: ce {v:.4}");
        }
    }
    Ok(())
}
