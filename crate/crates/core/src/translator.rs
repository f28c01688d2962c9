//! Condition-guided style transfer: a condition-injected generator, a patch
//! discriminator with a condition-classifier head, and their training loop
//! against a frozen source segmenter.

use dcaa_autograd::{Adam, Conv2d, Graph, ParamStore, Scope, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{CgstConfig, GanMode};
use crate::curves::Curves;
use crate::error::{Error, Result};
use crate::losses;
use crate::segnet::SegNet;
use crate::toyworld::{mix_seed, Batch, ConditionSampler, Dataset};

/// Spatially constant one-hot maps `[B, K, H, W]`, one code per image.
pub fn condition_maps(codes: &[usize], k: usize, h: usize, w: usize) -> Result<Tensor> {
    let hw = h * w;
    let mut data = vec![0.0; codes.len() * k * hw];
    for (b, &c) in codes.iter().enumerate() {
        if c >= k {
            return Err(Error::ConditionRange { index: c, count: k });
        }
        data[(b * k + c) * hw..(b * k + c + 1) * hw].fill(1.0);
    }
    Ok(Tensor::from_vec(&[codes.len(), k, h, w], data))
}

/// Appends the condition code to `features` as `K` constant channels.
pub fn inject_condition(g: &Graph, features: Var, codes: &[usize], k: usize) -> Result<Var> {
    let shape = g.shape(features);
    if shape.len() != 4 {
        return Err(Error::Shape(format!("features must be rank 4, got {shape:?}")));
    }
    if shape[0] != codes.len() {
        return Err(Error::Shape(format!("{} codes for a batch of {}", codes.len(), shape[0])));
    }
    let maps = condition_maps(codes, k, shape[2], shape[3])?;
    Ok(g.concat(&[features, g.constant(maps)]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatorArch {
    pub num_conditions: usize,
    pub gen_channels: [usize; 2],
    pub disc_channels: [usize; 3],
}

/// Encoder-decoder generator with the condition code concatenated at the
/// input and before each downsampling stage. The output layer starts at
/// zero, so an untrained generator is the identity.
#[derive(Clone, Debug)]
pub struct Generator {
    k: usize,
    stem: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    res1: Conv2d,
    res2: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    fuse: Conv2d,
    out: Conv2d,
}

impl Generator {
    pub fn new(store: &mut ParamStore, arch: &TranslatorArch, rng: &mut ChaCha8Rng) -> Self {
        let k = arch.num_conditions;
        let [a, b] = arch.gen_channels;
        Generator {
            k,
            stem: Conv2d::new(store, "gen.stem", 3 + k, a, 3, 1, rng),
            down1: Conv2d::new(store, "gen.down1", a + k, b, 3, 2, rng),
            down2: Conv2d::new(store, "gen.down2", b + k, b, 3, 2, rng),
            res1: Conv2d::new(store, "gen.res1", b, b, 3, 1, rng),
            res2: Conv2d::new(store, "gen.res2", b, b, 3, 1, rng),
            up1: Conv2d::new(store, "gen.up1", b, a, 3, 1, rng),
            up2: Conv2d::new(store, "gen.up2", a, a, 3, 1, rng),
            fuse: Conv2d::new(store, "gen.fuse", 2 * a, a, 3, 1, rng),
            out: Conv2d::zeros(store, "gen.out", a, 3, 1),
        }
    }

    /// Forward pass; `audit` receives the number of appended channels at
    /// every injection site.
    pub fn forward_audited(&self, s: Scope<'_>, x: Var, codes: &[usize], audit: &mut Vec<usize>) -> Result<Var> {
        let g = s.g;
        let mut inject = |v: Var| -> Result<Var> {
            let before = g.shape(v)[1];
            let out = inject_condition(g, v, codes, self.k)?;
            audit.push(g.shape(out)[1] - before);
            Ok(out)
        };
        let stem = g.relu(self.stem.forward(s, inject(x)?));
        let h = g.relu(self.down1.forward(s, inject(stem)?));
        let h = g.relu(self.down2.forward(s, inject(h)?));
        let r = self.res2.forward(s, g.relu(self.res1.forward(s, h)));
        let h = g.add(h, r);
        let h = g.relu(self.up1.forward(s, g.upsample_nearest(h, 2)));
        let h = g.relu(self.up2.forward(s, g.upsample_nearest(h, 2)));
        let h = g.relu(self.fuse.forward(s, g.concat(&[h, stem])));
        Ok(g.add(x, self.out.forward(s, h)))
    }

    pub fn forward(&self, s: Scope<'_>, x: Var, codes: &[usize]) -> Result<Var> {
        self.forward_audited(s, x, codes, &mut Vec::new())
    }
}

/// Patch discriminator with a realism head and a condition-classifier head
/// sharing one trunk.
#[derive(Clone, Debug)]
pub struct StyleDiscriminator {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    real: Conv2d,
    cls: Conv2d,
}

/// Discriminator outputs for one batch.
#[derive(Clone, Copy, Debug)]
pub struct StyleScores {
    /// `[B, 1, h, w]` realism logits.
    pub real_logits: Var,
    /// `[B, K]` condition simplex.
    pub cls_probs: Var,
}

impl StyleDiscriminator {
    pub fn new(store: &mut ParamStore, arch: &TranslatorArch, rng: &mut ChaCha8Rng) -> Self {
        let [a, b, c] = arch.disc_channels;
        StyleDiscriminator {
            c1: Conv2d::new(store, "dt.c1", 3, a, 3, 2, rng),
            c2: Conv2d::new(store, "dt.c2", a, b, 3, 2, rng),
            c3: Conv2d::new(store, "dt.c3", b, c, 3, 2, rng),
            real: Conv2d::new(store, "dt.real", c, 1, 3, 1, rng),
            cls: Conv2d::new(store, "dt.cls", c, arch.num_conditions, 1, 1, rng),
        }
    }

    pub fn forward(&self, s: Scope<'_>, x: Var) -> StyleScores {
        let g = s.g;
        let h = g.leaky_relu(self.c1.forward(s, x), 0.2);
        let h = g.leaky_relu(self.c2.forward(s, h), 0.2);
        let h = g.leaky_relu(self.c3.forward(s, h), 0.2);
        let real_logits = self.real.forward(s, h);
        let pooled = g.global_avg_pool(self.cls.forward(s, h));
        let shape = g.shape(pooled);
        let p = g.softmax_channels(g.reshape(pooled, &[shape[0], shape[1], 1, 1]));
        StyleScores {
            real_logits,
            cls_probs: g.reshape(p, &shape),
        }
    }
}

/// Generator plus discriminator with their parameter stores.
#[derive(Clone, Debug)]
pub struct Translator {
    pub arch: TranslatorArch,
    pub gen: Generator,
    pub gen_store: ParamStore,
    pub disc: StyleDiscriminator,
    pub disc_store: ParamStore,
}

impl Translator {
    pub fn new(arch: TranslatorArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen_store = ParamStore::new();
        let gen = Generator::new(&mut gen_store, &arch, &mut rng);
        let mut disc_store = ParamStore::new();
        let disc = StyleDiscriminator::new(&mut disc_store, &arch, &mut rng);
        Translator {
            arch,
            gen,
            gen_store,
            disc,
            disc_store,
        }
    }

    /// Builds a translator around loaded parameter stores.
    pub fn from_stores(arch: TranslatorArch, gen_store: &ParamStore, disc_store: &ParamStore) -> Result<Self> {
        let mut t = Translator::new(arch, 0);
        t.gen_store
            .load_from(gen_store)
            .map_err(|e| Error::Invalid(format!("generator parameters: {e}")))?;
        t.disc_store
            .load_from(disc_store)
            .map_err(|e| Error::Invalid(format!("discriminator parameters: {e}")))?;
        Ok(t)
    }

    pub fn num_conditions(&self) -> usize {
        self.arch.num_conditions
    }

    /// Stylises `images` `[B, 3, H, W]` toward the per-image conditions;
    /// output clipped to `[0, 1]`.
    pub fn translate(&self, images: &Tensor, codes: &[usize]) -> Result<Tensor> {
        let g = Graph::new();
        let x = g.constant(images.clone());
        let y = self.gen.forward(Scope::frozen(&g, &self.gen_store), x, codes)?;
        let out = g.value(y).map(|v| v.clamp(0.0, 1.0));
        if !out.is_finite() {
            return Err(Error::NonFinite("translated images".into()));
        }
        Ok(out)
    }

    /// Condition-classifier argmax for each image.
    pub fn classify(&self, images: &Tensor) -> Vec<usize> {
        let g = Graph::new();
        let x = g.constant(images.clone());
        let s = self.disc.forward(Scope::frozen(&g, &self.disc_store), x);
        let p = g.value(s.cls_probs);
        let k = p.shape()[1];
        p.data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Pieces of the translator objective for one batch, all as graph nodes.
pub struct CgstTerms {
    pub cgan: Var,
    pub cls: Var,
    pub sc: Var,
}

/// Computes the full objective's terms with the generator trainable and the
/// discriminator and segmenter bound as given by `disc_trainable`.
#[allow(clippy::too_many_arguments)]
pub fn cgst_terms(
    g: &Graph,
    tr: &Translator,
    fseg: &SegNet,
    source: &Batch,
    fake_codes: &[usize],
    target: &Batch,
    target_codes: &[usize],
    gen_trainable: bool,
    disc_trainable: bool,
) -> Result<CgstTerms> {
    let xs = g.constant(source.images.clone());
    let xt = g.constant(target.images.clone());
    let fake = tr.gen.forward(Scope::new(g, &tr.gen_store, gen_trainable), xs, fake_codes)?;
    let ds = Scope::new(g, &tr.disc_store, disc_trainable);
    let real_scores = tr.disc.forward(ds, xt);
    let fake_scores = tr.disc.forward(ds, fake);
    let cgan = losses::cgan_loss(g, g.sigmoid(real_scores.real_logits), g.sigmoid(fake_scores.real_logits));
    let cls = losses::cls_loss(g, real_scores.cls_probs, target_codes, fake_scores.cls_probs, fake_codes);
    let (h, w) = source.hw();
    let seg = fseg.forward(g, fake, false, None)?;
    let main = seg.main.ok_or_else(|| Error::Invalid("reference segmenter needs a single head".into()))?;
    let sc = losses::masked_nll(g, main.log_probs_at(g, h, w), &source.labels, None, losses::Normalization::Mean);
    Ok(CgstTerms { cgan, cls, sc })
}

/// Summary of a translator training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CgstReport {
    pub steps: usize,
    pub final_d_loss: f64,
    pub final_g_loss: f64,
}

fn codes_for(step: usize, batch: usize, k: usize) -> Vec<usize> {
    (0..batch).map(|j| (step * batch + j) % k).collect()
}

fn adam_lr(cfg: &CgstConfig, step: usize, base: f64) -> f64 {
    let t = step as f64 / cfg.steps.max(1) as f64;
    base * (1.0 - 0.5 * t)
}

/// Alternating discriminator / generator updates. `fseg` stays frozen.
pub fn train_translator(
    cfg: &CgstConfig,
    tr: &mut Translator,
    fseg: &SegNet,
    source: &Dataset,
    target: &Dataset,
    seed: u64,
    curves: &mut Curves,
) -> Result<CgstReport> {
    let k = tr.num_conditions();
    if target.manifest.num_conditions() < k {
        return Err(Error::Invalid(format!(
            "target set has {} conditions, translator expects {k}",
            target.manifest.num_conditions()
        )));
    }
    let mut src_sampler = ConditionSampler::new(vec![(0..source.len()).collect()], mix_seed(seed, 11, 0));
    let mut tgt_sampler = ConditionSampler::new(target.by_condition()[..k].to_vec(), mix_seed(seed, 12, 0));
    let mut opt_g = Adam::new(&tr.gen_store, cfg.beta1, cfg.beta2);
    let mut opt_d = Adam::new(&tr.disc_store, cfg.beta1, cfg.beta2);
    let fseg_sum = fseg.store.checksum();
    let (mut last_d, mut last_g) = (f64::NAN, f64::NAN);
    for step in 0..cfg.steps {
        let fake_codes = codes_for(step, cfg.batch, k);
        let target_codes = codes_for(step + 1, cfg.batch, k);
        let sidx = src_sampler.next(0, cfg.batch).ok_or_else(|| Error::Invalid("empty source set".into()))?;
        let mut tidx = Vec::with_capacity(cfg.batch);
        for &c in &target_codes {
            let i = tgt_sampler
                .next(c, 1)
                .ok_or_else(|| Error::Invalid(format!("no target images for condition {c}")))?;
            tidx.extend(i);
        }
        let sb = source.batch_of(&sidx);
        let tb = target.batch_of(&tidx);

        // Discriminator step.
        let d_loss = {
            let g = Graph::new();
            let xs = g.constant(sb.images.clone());
            let fake = tr.gen.forward(Scope::frozen(&g, &tr.gen_store), xs, &fake_codes)?;
            let fake = g.detach(fake);
            let ds = Scope::new(&g, &tr.disc_store, true);
            let real = tr.disc.forward(ds, g.constant(tb.images.clone()));
            let fk = tr.disc.forward(ds, fake);
            let adv = match cfg.gan {
                GanMode::Vanilla => g.scale(losses::cgan_loss_logits(&g, real.real_logits, fk.real_logits), -1.0),
                GanMode::LeastSquares => {
                    let r = g.add_scalar(real.real_logits, -1.0);
                    g.add(g.mean(g.mul(r, r)), g.mean(g.mul(fk.real_logits, fk.real_logits)))
                }
            };
            let cls = losses::condition_nll(&g, real.cls_probs, &target_codes);
            let loss = g.add(adv, cls);
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("translator discriminator loss at step {step}")));
            }
            let grads = g.backward(loss).for_store(&tr.disc_store);
            opt_d.step(&mut tr.disc_store, &grads, adam_lr(cfg, step, cfg.lr_d));
            v
        };

        // Generator step.
        let (g_loss, parts) = {
            let g = Graph::new();
            let xs = g.constant(sb.images.clone());
            let fake = tr.gen.forward(Scope::new(&g, &tr.gen_store, true), xs, &fake_codes)?;
            let fk = tr.disc.forward(Scope::frozen(&g, &tr.disc_store), fake);
            let adv = match cfg.gan {
                GanMode::Vanilla => losses::generator_adv_loss_logits(&g, fk.real_logits),
                GanMode::LeastSquares => {
                    let r = g.add_scalar(fk.real_logits, -1.0);
                    g.mean(g.mul(r, r))
                }
            };
            let cls = losses::condition_nll(&g, fk.cls_probs, &fake_codes);
            let (h, w) = sb.hw();
            let seg = fseg.forward(&g, fake, false, None)?;
            let main = seg.main.ok_or_else(|| Error::Invalid("reference segmenter needs a single head".into()))?;
            let sc = losses::masked_nll(&g, main.log_probs_at(&g, h, w), &sb.labels, None, losses::Normalization::Mean);
            let loss = g.add(g.add(adv, cls), g.scale(sc, cfg.lambda_sc));
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("generator loss at step {step}")));
            }
            let parts = [g.value(adv).item(), g.value(cls).item(), g.value(sc).item()];
            let grads = g.backward(loss).for_store(&tr.gen_store);
            opt_g.step(&mut tr.gen_store, &grads, adam_lr(cfg, step, cfg.lr_g));
            (v, parts)
        };
        last_d = d_loss;
        last_g = g_loss;
        if step % 10 == 0 || step + 1 == cfg.steps {
            curves.push(step, "d_loss", d_loss);
            curves.push(step, "g_loss", g_loss);
            curves.push(step, "g_adv", parts[0]);
            curves.push(step, "g_cls", parts[1]);
            curves.push(step, "g_sc", parts[2]);
        }
        if step % 100 == 0 {
            log::info!("cgst step {step}: d {d_loss:.4} g {g_loss:.4} sc {:.4}", parts[2]);
        }
    }
    debug_assert_eq!(fseg.store.checksum(), fseg_sum);
    Ok(CgstReport {
        steps: cfg.steps,
        final_d_loss: last_d,
        final_g_loss: last_g,
    })
}

/// Per-condition accuracy of the condition classifier on images translated
/// from `source` toward each condition.
pub fn translated_cls_accuracy(tr: &Translator, source: &Dataset, batch: usize) -> Result<Vec<f64>> {
    let k = tr.num_conditions();
    let mut acc = vec![0.0; k];
    for (c, a) in acc.iter_mut().enumerate() {
        let mut hits = 0usize;
        for chunk in (0..source.len()).collect::<Vec<_>>().chunks(batch) {
            let b = source.batch_of(chunk);
            let codes = vec![c; chunk.len()];
            let y = tr.translate(&b.images, &codes)?;
            hits += tr.classify(&y).iter().filter(|&&p| p == c).count();
        }
        *a = hits as f64 / source.len().max(1) as f64;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(k: usize) -> TranslatorArch {
        TranslatorArch {
            num_conditions: k,
            gen_channels: [8, 8],
            disc_channels: [8, 8, 8],
        }
    }

    #[test]
    fn injection_shapes_and_values() {
        let g = Graph::new();
        let f = g.constant(Tensor::zeros(&[2, 8, 5, 4]));
        let out = inject_condition(&g, f, &[2, 0], 3).unwrap();
        let t = g.value(out);
        assert_eq!(t.shape(), &[2, 11, 5, 4]);
        let hw = 20;
        for ch in 0..3 {
            let want = if ch == 2 { 1.0 } else { 0.0 };
            assert!(t.data()[(8 + ch) * hw..(9 + ch) * hw].iter().all(|&v| v == want));
        }
        assert!(inject_condition(&g, f, &[3, 0], 3).is_err());
    }

    #[test]
    fn generator_injects_at_three_sites() {
        let tr = Translator::new(arch(3), 1);
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 16, 16], 0.5));
        let mut audit = Vec::new();
        tr.gen
            .forward_audited(Scope::frozen(&g, &tr.gen_store), x, &[1], &mut audit)
            .unwrap();
        assert_eq!(audit, vec![3, 3, 3]);
        assert_eq!(audit.iter().sum::<usize>(), 9);
    }

    #[test]
    fn untrained_generator_is_identity() {
        let tr = Translator::new(arch(2), 4);
        let x = Tensor::from_vec(&[2, 3, 16, 16], (0..1536).map(|i| (i % 255) as f64 / 255.0).collect());
        let y = tr.translate(&x, &[0, 1]).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.zip_map(&x, |a, b| a - b).max_abs() < 1e-12);
    }

    #[test]
    fn classifier_head_is_a_simplex() {
        let tr = Translator::new(arch(3), 5);
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 16, 16], 0.3));
        let s = tr.disc.forward(Scope::frozen(&g, &tr.disc_store), x);
        let p = g.value(s.cls_probs);
        assert_eq!(p.shape(), &[2, 3]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.shape(s.real_logits), vec![2, 1, 2, 2]);
    }
}
