//! Segmentation networks: a shared encoder feeding per-condition decoders,
//! fused by the condition attention module into a CA head, plus the
//! Mix/Sep/SM head layouts used for ablations.

use dcaa_autograd::{Conv2d, Graph, ParamStore, Scope, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Head layout. `Cam` is the condition attention model; the rest are the
/// ablation layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Shared encoder, one decoder.
    Mix,
    /// One encoder+decoder per condition.
    Sep,
    /// Shared encoder, one decoder per condition.
    Sm,
    /// Shared encoder, per-condition decoders, attention fusion, CA head.
    Cam,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Mix => "mix",
            Variant::Sep => "sep",
            Variant::Sm => "sm",
            Variant::Cam => "cam",
        }
    }

    /// Whether the model has per-condition decoder branches.
    pub fn has_branches(self) -> bool {
        !matches!(self, Variant::Mix)
    }

    /// Whether the model has a single global head (CA head or Mix decoder).
    pub fn has_main(self) -> bool {
        matches!(self, Variant::Mix | Variant::Cam)
    }
}

/// Architecture block; stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub num_conditions: usize,
    /// Encoder widths: full-resolution stem, then the two stride-2 stages.
    pub enc_channels: [usize; 2],
    /// Decoder feature width `D`.
    pub feat_dim: usize,
    pub att_hidden: usize,
}

impl SegConfig {
    pub fn new(variant: Variant, num_classes: usize, num_conditions: usize) -> Self {
        SegConfig {
            variant,
            num_classes,
            num_conditions,
            enc_channels: [16, 32],
            feat_dim: 32,
            att_hidden: 16,
        }
    }

    /// Output stride of every probability map.
    pub const STRIDE: usize = 4;
}

#[derive(Clone, Debug)]
struct Encoder {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &SegConfig, rng: &mut ChaCha8Rng) -> Self {
        let [a, b] = cfg.enc_channels;
        Encoder {
            c1: Conv2d::new(store, &format!("{name}.c1"), 3, a, 3, 1, rng),
            c2: Conv2d::new(store, &format!("{name}.c2"), a, b, 3, 2, rng),
            c3: Conv2d::new(store, &format!("{name}.c3"), b, b, 3, 2, rng),
        }
    }

    fn forward(&self, s: Scope<'_>, x: Var) -> Var {
        let g = s.g;
        let h = g.relu(self.c1.forward(s, x));
        let h = g.relu(self.c2.forward(s, h));
        g.relu(self.c3.forward(s, h))
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    conv: Conv2d,
    cls: Conv2d,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, cfg: &SegConfig, rng: &mut ChaCha8Rng) -> Self {
        Decoder {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, cfg.feat_dim, 3, 1, rng),
            cls: Conv2d::new(store, &format!("{name}.cls"), cfg.feat_dim, cfg.num_classes, 1, 1, rng),
        }
    }

    fn forward(&self, s: Scope<'_>, x: Var) -> HeadOut {
        let feat = s.g.relu(self.conv.forward(s, x));
        HeadOut::from_logits(s.g, feat, self.cls.forward(s, feat))
    }
}

#[derive(Clone, Debug)]
struct CaHead {
    c1: Conv2d,
    c2: Conv2d,
    cls: Conv2d,
}

#[derive(Clone, Debug)]
struct AttentionFuser {
    c1: Conv2d,
    c2: Conv2d,
}

/// Outputs of one decoder head at prediction resolution.
#[derive(Clone, Copy, Debug)]
pub struct HeadOut {
    /// `[B, D, h, w]`.
    pub feat: Var,
    /// `[B, L, h, w]` raw scores.
    pub logits: Var,
    /// `[B, L, h, w]` per-pixel simplex.
    pub probs: Var,
}

impl HeadOut {
    fn from_logits(g: &Graph, feat: Var, logits: Var) -> Self {
        HeadOut {
            feat,
            logits,
            probs: g.softmax_channels(logits),
        }
    }

    /// Log-probabilities at `[h, w]`: logits resized bilinearly, then
    /// log-softmax.
    pub fn log_probs_at(&self, g: &Graph, h: usize, w: usize) -> Var {
        g.log_softmax_channels(g.resize_bilinear(self.logits, h, w))
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct PredictionBundle {
    pub variant: Variant,
    /// Per-condition heads; `None` where routing skipped a branch.
    pub branches: Vec<Option<HeadOut>>,
    /// `[B, K, h, w]` attention weights, softmax-normalised over `K`.
    pub attention: Option<Var>,
    /// Attention-fused feature `f`.
    pub fused_feat: Option<Var>,
    /// The CA head (CAM) or the single decoder (Mix).
    pub main: Option<HeadOut>,
}

impl PredictionBundle {
    pub fn branch(&self, i: usize) -> Option<&HeadOut> {
        self.branches.get(i).and_then(Option::as_ref)
    }
}

/// Inference-time combination of the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    /// CAM: `0.5 * sum_i W_i * p_i + 0.5 * p_CA`. Mix: its head. Sep/SM:
    /// mean vote.
    Fused,
    /// The main head alone.
    CaOnly,
    /// Uniform mean over every available head.
    MeanVote,
}

/// A segmentation model: architecture plus parameters.
#[derive(Clone, Debug)]
pub struct SegNet {
    pub cfg: SegConfig,
    pub store: ParamStore,
    encoders: Vec<Encoder>,
    decoders: Vec<Decoder>,
    attention: Option<AttentionFuser>,
    ca: Option<CaHead>,
}

impl SegNet {
    pub fn new(cfg: SegConfig, seed: u64) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::Invalid("segmenter needs at least 2 classes".into()));
        }
        if cfg.variant.has_branches() && cfg.num_conditions < 1 {
            return Err(Error::Invalid("branched variants need at least 1 condition".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = cfg.num_conditions;
        let enc_out = cfg.enc_channels[1];
        let (encoders, decoders) = match cfg.variant {
            Variant::Mix => (
                vec![Encoder::new(&mut store, "enc", &cfg, &mut rng)],
                vec![Decoder::new(&mut store, "dec", enc_out, &cfg, &mut rng)],
            ),
            Variant::Sm | Variant::Cam => {
                let enc = Encoder::new(&mut store, "enc", &cfg, &mut rng);
                let decs = (0..k)
                    .map(|i| Decoder::new(&mut store, &format!("dec{i}"), enc_out, &cfg, &mut rng))
                    .collect();
                (vec![enc], decs)
            }
            Variant::Sep => {
                let mut encs = Vec::new();
                let mut decs = Vec::new();
                for i in 0..k {
                    encs.push(Encoder::new(&mut store, &format!("enc{i}"), &cfg, &mut rng));
                    decs.push(Decoder::new(&mut store, &format!("dec{i}"), enc_out, &cfg, &mut rng));
                }
                (encs, decs)
            }
        };
        let (attention, ca) = if cfg.variant == Variant::Cam {
            let d = cfg.feat_dim;
            let att = AttentionFuser {
                c1: Conv2d::new(&mut store, "att.c1", k * d, cfg.att_hidden, 3, 1, &mut rng),
                c2: Conv2d::new(&mut store, "att.c2", cfg.att_hidden, k, 1, 1, &mut rng),
            };
            let ca = CaHead {
                c1: Conv2d::new(&mut store, "ca.c1", (k + 1) * d, d, 3, 1, &mut rng),
                c2: Conv2d::new(&mut store, "ca.c2", d, d, 3, 1, &mut rng),
                cls: Conv2d::new(&mut store, "ca.cls", d, cfg.num_classes, 1, 1, &mut rng),
            };
            (Some(att), Some(ca))
        } else {
            (None, None)
        };
        Ok(SegNet {
            cfg,
            store,
            encoders,
            decoders,
            attention,
            ca,
        })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Full forward pass. `route` restricts Sep/SM to a single condition
    /// branch (training); `None` evaluates all branches. CAM always runs
    /// every branch because the attention needs all of them.
    pub fn forward(&self, g: &Graph, x: Var, trainable: bool, route: Option<usize>) -> Result<PredictionBundle> {
        let s = Scope::new(g, &self.store, trainable);
        let k = self.cfg.num_conditions;
        if let Some(r) = route {
            if self.cfg.variant.has_branches() && r >= k {
                return Err(Error::ConditionRange { index: r, count: k });
            }
        }
        let bundle = match self.cfg.variant {
            Variant::Mix => {
                let e = self.encoders[0].forward(s, x);
                PredictionBundle {
                    variant: Variant::Mix,
                    branches: Vec::new(),
                    attention: None,
                    fused_feat: None,
                    main: Some(self.decoders[0].forward(s, e)),
                }
            }
            Variant::Sm | Variant::Sep => {
                let shared = (self.cfg.variant == Variant::Sm).then(|| self.encoders[0].forward(s, x));
                let branches = (0..k)
                    .map(|i| {
                        if route.is_some_and(|r| r != i) {
                            return None;
                        }
                        let e = match shared {
                            Some(e) => e,
                            None => self.encoders[i].forward(s, x),
                        };
                        Some(self.decoders[i].forward(s, e))
                    })
                    .collect();
                PredictionBundle {
                    variant: self.cfg.variant,
                    branches,
                    attention: None,
                    fused_feat: None,
                    main: None,
                }
            }
            Variant::Cam => self.forward_cam(s, x),
        };
        check_finite(g, &bundle)?;
        Ok(bundle)
    }

    fn forward_cam(&self, s: Scope<'_>, x: Var) -> PredictionBundle {
        let g = s.g;
        let e = self.encoders[0].forward(s, x);
        let heads: Vec<HeadOut> = self.decoders.iter().map(|d| d.forward(s, e)).collect();
        let feats: Vec<Var> = heads.iter().map(|h| h.feat).collect();
        let cat = g.concat(&feats);
        let att = self.attention.as_ref().expect("cam has attention");
        let a = g.relu(att.c1.forward(s, cat));
        let weights = g.softmax_channels(att.c2.forward(s, a));
        let fused = fuse_features(g, &feats, weights);
        let ca = self.ca.as_ref().expect("cam has CA head");
        let mut all = feats.clone();
        all.push(fused);
        let h = g.relu(ca.c1.forward(s, g.concat(&all)));
        let f_ca = g.relu(ca.c2.forward(s, h));
        let main = HeadOut::from_logits(g, f_ca, ca.cls.forward(s, f_ca));
        PredictionBundle {
            variant: Variant::Cam,
            branches: heads.into_iter().map(Some).collect(),
            attention: Some(weights),
            fused_feat: Some(fused),
            main: Some(main),
        }
    }

    /// Probability map at the input resolution, `[B, L, H, W]`.
    pub fn predict(&self, images: &Tensor, mode: PredictMode) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4();
        let g = Graph::new();
        let x = g.constant(images.clone());
        let b = self.forward(&g, x, false, None)?;
        let low = combine(&g, &b, mode)?;
        Ok(upsample_probs(&g, low, h, w))
    }
}

fn check_finite(g: &Graph, b: &PredictionBundle) -> Result<()> {
    let mut named: Vec<(String, Var)> = Vec::new();
    for (i, h) in b.branches.iter().enumerate() {
        if let Some(h) = h {
            named.push((format!("decoder {i} probabilities"), h.probs));
        }
    }
    if let Some(a) = b.attention {
        named.push(("attention weights".into(), a));
    }
    if let Some(m) = &b.main {
        named.push(("main head probabilities".into(), m.probs));
    }
    for (name, v) in named {
        if !g.with_value(v, Tensor::is_finite) {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(())
}

/// `f = sum_i W[:, i] * f_i` for `weights` of shape `[B, K, h, w]`.
pub fn fuse_features(g: &Graph, feats: &[Var], weights: Var) -> Var {
    let mut acc: Option<Var> = None;
    for (i, f) in feats.iter().enumerate() {
        let wi = g.slice_channels(weights, i, 1);
        let term = g.mul_channel(*f, wi);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.expect("at least one feature map")
}

/// `0.5 * sum_i W_i * p_i + 0.5 * p_CA` at prediction resolution.
pub fn attentive_fusion(g: &Graph, branch_probs: &[Var], weights: Var, ca_probs: Var) -> Var {
    let mixed = fuse_features(g, branch_probs, weights);
    g.add(g.scale(mixed, 0.5), g.scale(ca_probs, 0.5))
}

/// Combines heads at prediction resolution.
pub fn combine(g: &Graph, b: &PredictionBundle, mode: PredictMode) -> Result<Var> {
    let branch_probs: Vec<Var> = b.branches.iter().flatten().map(|h| h.probs).collect();
    let mean_vote = |extra: Option<Var>| -> Result<Var> {
        let mut all = branch_probs.clone();
        all.extend(extra);
        if all.is_empty() {
            return Err(Error::Invalid("no heads to vote over".into()));
        }
        let n = all.len() as f64;
        let mut acc = all[0];
        for v in &all[1..] {
            acc = g.add(acc, *v);
        }
        Ok(g.scale(acc, 1.0 / n))
    };
    let main = b.main.map(|m| m.probs);
    match (mode, b.variant) {
        (PredictMode::Fused, Variant::Cam) => {
            let w = b.attention.expect("cam bundle has attention");
            Ok(attentive_fusion(g, &branch_probs, w, main.expect("cam has main")))
        }
        (PredictMode::Fused, Variant::Mix) | (PredictMode::CaOnly, Variant::Mix | Variant::Cam) => {
            Ok(main.expect("variant has a main head"))
        }
        (PredictMode::CaOnly, _) => Err(Error::Invalid(format!("{} has no CA head", b.variant.name()))),
        (PredictMode::Fused, Variant::Sep | Variant::Sm) | (PredictMode::MeanVote, _) => mean_vote(main),
    }
}

/// Bilinear upsampling of a probability map followed by renormalisation.
pub fn upsample_probs(g: &Graph, probs: Var, h: usize, w: usize) -> Tensor {
    let up = g.resize_bilinear(probs, h, w);
    let t = g.value(up);
    renormalize(&t)
}

pub fn renormalize(t: &Tensor) -> Tensor {
    let (n, c, h, w) = t.dims4();
    let hw = h * w;
    let mut out = t.clone();
    let d = out.data_mut();
    for b in 0..n {
        for p in 0..hw {
            let s: f64 = (0..c).map(|ch| d[(b * c + ch) * hw + p]).sum();
            if s > 0.0 {
                for ch in 0..c {
                    d[(b * c + ch) * hw + p] /= s;
                }
            }
        }
    }
    out
}

/// Per-pixel argmax as 1-based labels, ties to the lowest class.
pub fn argmax_labels(probs: &Tensor) -> Vec<u8> {
    let (n, c, h, w) = probs.dims4();
    let hw = h * w;
    let d = probs.data();
    let mut out = vec![0u8; n * hw];
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            let mut bv = f64::NEG_INFINITY;
            for ch in 0..c {
                let v = d[(b * c + ch) * hw + p];
                if v > bv {
                    bv = v;
                    best = ch;
                }
            }
            out[b * hw + p] = (best + 1) as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, h: usize, w: usize) -> Tensor {
        let len = n * 3 * h * w;
        Tensor::from_vec(&[n, 3, h, w], (0..len).map(|i| ((i * 31) % 17) as f64 / 16.0).collect())
    }

    #[test]
    fn simplex_maps_and_shapes() {
        let net = SegNet::new(SegConfig::new(Variant::Cam, 6, 3), 1).unwrap();
        let g = Graph::new();
        let x = g.constant(batch(2, 16, 16));
        let b = net.forward(&g, x, false, None).unwrap();
        let w = g.value(b.attention.unwrap());
        assert_eq!(w.shape(), &[2, 3, 4, 4]);
        let check_simplex = |t: &Tensor| {
            let (n, c, h, ww) = t.dims4();
            for bi in 0..n {
                for p in 0..h * ww {
                    let s: f64 = (0..c).map(|ch| t.data()[(bi * c + ch) * h * ww + p]).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        };
        check_simplex(&w);
        for h in b.branches.iter().flatten() {
            check_simplex(&g.value(h.probs));
            assert_eq!(g.shape(h.feat), vec![2, 32, 4, 4]);
        }
        check_simplex(&g.value(b.main.unwrap().probs));
        let p = net.predict(&batch(2, 16, 16), PredictMode::Fused).unwrap();
        assert_eq!(p.shape(), &[2, 6, 16, 16]);
        check_simplex(&p);
    }

    #[test]
    fn mix_output_shape() {
        let net = SegNet::new(SegConfig::new(Variant::Mix, 5, 3), 2).unwrap();
        let g = Graph::new();
        let x = g.constant(batch(3, 20, 24));
        let b = net.forward(&g, x, false, None).unwrap();
        assert_eq!(g.shape(b.main.unwrap().probs), vec![3, 5, 5, 6]);
        assert!(b.branches.is_empty());
    }

    #[test]
    fn routing_needs_valid_condition() {
        let net = SegNet::new(SegConfig::new(Variant::Sep, 4, 2), 2).unwrap();
        let g = Graph::new();
        let x = g.constant(batch(1, 16, 16));
        assert!(net.forward(&g, x, true, Some(2)).is_err());
        let b = net.forward(&g, x, true, Some(1)).unwrap();
        assert!(b.branch(0).is_none() && b.branch(1).is_some());
    }

    #[test]
    fn student_is_smaller_than_teacher() {
        let teacher = SegNet::new(SegConfig::new(Variant::Cam, 6, 3), 0).unwrap();
        let student = SegNet::new(SegConfig::new(Variant::Mix, 6, 3), 0).unwrap();
        assert!(student.param_count() < teacher.param_count());
    }

    #[test]
    fn argmax_ties_break_low() {
        let t = Tensor::from_vec(&[1, 3, 1, 2], vec![0.4, 0.2, 0.4, 0.5, 0.2, 0.3]);
        assert_eq!(argmax_labels(&t), vec![1, 2]);
    }
}
