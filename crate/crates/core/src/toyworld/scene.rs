use dcaa_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::condition::ConditionId;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One image with its dense label map.
///
/// `label` holds `height * width` values in `0..=L`; 0 means unlabeled.
/// Raw source samples carry no condition; target and translated samples do.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: Vec<u8>,
    pub domain: Domain,
    pub condition: Option<ConditionId>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Class 1 is sky, class 2 is ground; classes 3..=L are drawn as shapes
/// whose geometry cycles through building, vegetation, vehicle, pole.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub domain: Domain,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Horizon row as a fraction of the height, sampled uniformly.
    pub horizon: (f64, f64),
    /// Per-sample uniform jitter added to each class colour channel.
    pub color_jitter: f64,
    /// Std-dev of per-pixel colour noise in the target domain.
    pub target_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            num_classes: 6,
            domain: Domain::Source,
            min_shapes: 1,
            max_shapes: 6,
            horizon: (0.35, 0.6),
            color_jitter: 0.05,
            target_noise: 0.05,
        }
    }
}

const BASE_PALETTE: [[f64; 3]; 6] = [
    [0.55, 0.70, 0.90],
    [0.35, 0.35, 0.38],
    [0.70, 0.45, 0.30],
    [0.25, 0.60, 0.25],
    [0.80, 0.15, 0.15],
    [0.85, 0.80, 0.20],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Building,
    Vegetation,
    Vehicle,
    Pole,
}

impl SceneSpec {
    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::SceneSpec(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > 255 {
            return Err(Error::SceneSpec("at most 255 classes fit an 8-bit label".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::SceneSpec(format!(
                "image must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::SceneSpec("min_shapes > max_shapes".into()));
        }
        let (lo, hi) = self.horizon;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::SceneSpec(format!("bad horizon range {lo}..{hi}")));
        }
        Ok(())
    }

    /// Source-domain colour of a class (1-based).
    pub fn source_color(&self, class: usize) -> [f64; 3] {
        if class <= BASE_PALETTE.len() {
            return BASE_PALETTE[class - 1];
        }
        // Extra classes get a deterministic spread of colours.
        let t = class as f64 * 0.618_033_988_75;
        [
            0.2 + 0.6 * (t.fract()),
            0.2 + 0.6 * ((t * 1.7).fract()),
            0.2 + 0.6 * ((t * 2.3).fract()),
        ]
    }

    /// Colour remap that separates the target domain from the source:
    /// every channel mixes with its cyclic neighbour.
    pub fn target_color(&self, c: [f64; 3]) -> [f64; 3] {
        [
            0.55 * c[0] + 0.45 * c[2],
            0.55 * c[1] + 0.45 * c[0],
            0.55 * c[2] + 0.45 * c[1],
        ]
    }

    /// Bounds on the corpus-mean pixel frequency of each class (index 0 is
    /// class 1). Sky and ground are bands split at the horizon; shapes
    /// occlude them.
    pub fn frequency_bands(&self) -> Vec<(f64, f64)> {
        let mut bands = vec![(0.25, 0.55), (0.25, 0.65)];
        for _ in 3..=self.num_classes {
            bands.push((0.005, 0.20));
        }
        bands.truncate(self.num_classes);
        bands
    }

    fn shape_kind(class: usize) -> ShapeKind {
        match (class - 3) % 4 {
            0 => ShapeKind::Building,
            1 => ShapeKind::Vegetation,
            2 => ShapeKind::Vehicle,
            _ => ShapeKind::Pole,
        }
    }
}

/// Draws the label layout: returns the `[H*W]` class map.
fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let hf = h as f64;
    let wf = w as f64;
    let horizon = (rng.random_range(spec.horizon.0..=spec.horizon.1) * hf).round() as usize;
    let mut label = vec![2u8; h * w];
    for y in 0..horizon.min(h) {
        label[y * w..(y + 1) * w].fill(1);
    }
    if spec.num_classes < 3 {
        return label;
    }
    let n_shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    for _ in 0..n_shapes {
        let class = rng.random_range(3..=spec.num_classes);
        let mut fill_rect = |x0: f64, y0: f64, x1: f64, y1: f64| {
            let (xa, xb) = (x0.max(0.0).round() as usize, x1.min(wf).round() as usize);
            let (ya, yb) = (y0.max(0.0).round() as usize, y1.min(hf).round() as usize);
            for y in ya..yb {
                for x in xa..xb {
                    label[y * w + x] = class as u8;
                }
            }
        };
        let hz = horizon as f64;
        match SceneSpec::shape_kind(class) {
            ShapeKind::Building => {
                let bw = rng.random_range(0.15..0.35) * wf;
                let bh = rng.random_range(0.2..0.45) * hf;
                let x0 = rng.random_range(-0.1 * wf..wf - 0.5 * bw);
                let base = hz + rng.random_range(0.0..0.1) * hf;
                fill_rect(x0, base - bh, x0 + bw, base);
            }
            ShapeKind::Vegetation => {
                let r = rng.random_range(0.08..0.18) * hf;
                let cx = rng.random_range(0.0..wf);
                let cy = hz - rng.random_range(0.0..0.2) * hf;
                for y in 0..h {
                    for x in 0..w {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            label[y * w + x] = class as u8;
                        }
                    }
                }
            }
            ShapeKind::Vehicle => {
                let vw = rng.random_range(0.12..0.25) * wf;
                let vh = rng.random_range(0.08..0.14) * hf;
                let x0 = rng.random_range(0.0..wf - 0.5 * vw);
                let base = rng.random_range(hz + vh..=hf.max(hz + vh));
                fill_rect(x0, base - vh, x0 + vw, base);
            }
            ShapeKind::Pole => {
                let pw = (0.05 * wf).max(2.0);
                let ph = rng.random_range(0.3..0.5) * hf;
                let x0 = rng.random_range(0.0..wf - pw);
                let base = hz + rng.random_range(0.05..0.25) * hf;
                fill_rect(x0, base - ph, x0 + pw, base);
            }
        }
    }
    label
}

/// Procedurally renders one scene. Pure in `(seed, spec)`.
///
/// Source style: flat class colours with a darkened grid texture.
/// Target style: remapped colours with per-pixel Gaussian noise.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = layout(spec, &mut rng);
    let (h, w) = (spec.height, spec.width);
    let hw = h * w;
    let mut colors = Vec::with_capacity(spec.num_classes);
    for class in 1..=spec.num_classes {
        let base = spec.source_color(class);
        let mut c = [0.0; 3];
        for ch in 0..3 {
            c[ch] = (base[ch] + rng.random_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0);
        }
        if spec.domain == Domain::Target {
            c = spec.target_color(c);
        }
        colors.push(c);
    }
    let noise = Normal::new(0.0, spec.target_noise.max(1e-12)).expect("valid noise std");
    let mut data = vec![0.0; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let c = colors[label[p] as usize - 1];
            match spec.domain {
                Domain::Source => {
                    let shade = if x % 6 == 0 || y % 6 == 0 { 0.8 } else { 1.0 };
                    for ch in 0..3 {
                        data[ch * hw + p] = c[ch] * shade;
                    }
                }
                Domain::Target => {
                    for ch in 0..3 {
                        data[ch * hw + p] = (c[ch] + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(Sample {
        image: Tensor::from_vec(&[3, h, w], data),
        label,
        domain: spec.domain,
        condition: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(0, &spec).unwrap(), generate_scene(0, &spec).unwrap());
        assert_ne!(generate_scene(0, &spec).unwrap().label, generate_scene(1, &spec).unwrap().label);
    }

    #[test]
    fn default_scene_has_three_classes_and_no_ignore() {
        for seed in 0..50 {
            let s = generate_scene(seed, &SceneSpec::default()).unwrap();
            let mut seen = [false; 7];
            for &l in &s.label {
                assert!((1..=6).contains(&l));
                seen[l as usize] = true;
            }
            assert!(seen.iter().filter(|b| **b).count() >= 3, "seed {seed}");
        }
    }

    #[test]
    fn image_in_unit_range_both_domains() {
        for d in [Domain::Source, Domain::Target] {
            let s = generate_scene(4, &SceneSpec::default().with_domain(d)).unwrap();
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.image.shape(), &[3, 64, 64]);
        }
    }

    #[test]
    fn rejects_tiny_specs() {
        let mut spec = SceneSpec {
            num_classes: 1,
            ..SceneSpec::default()
        };
        assert!(generate_scene(0, &spec).is_err());
        spec.num_classes = 6;
        spec.height = 15;
        assert!(generate_scene(0, &spec).is_err());
    }

    #[test]
    fn domains_share_layout_for_same_seed() {
        let a = generate_scene(9, &SceneSpec::default()).unwrap();
        let b = generate_scene(9, &SceneSpec::default().with_domain(Domain::Target)).unwrap();
        assert_eq!(a.label, b.label);
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn corpus_class_frequencies_within_bands() {
        let spec = SceneSpec::default();
        let n = 1000;
        let mut freq = vec![0.0; spec.num_classes];
        for seed in 0..n {
            let s = generate_scene(seed, &spec).unwrap();
            for &l in &s.label {
                freq[l as usize - 1] += 1.0;
            }
        }
        let total = (n as usize * spec.height * spec.width) as f64;
        for (i, (lo, hi)) in spec.frequency_bands().into_iter().enumerate() {
            let f = freq[i] / total;
            assert!(lo <= f && f <= hi, "class {} mean frequency {f} outside [{lo}, {hi}]", i + 1);
        }
    }
}
