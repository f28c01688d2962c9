use dcaa_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Haze colour the fog transform blends toward.
pub const FOG_HAZE: [f64; 3] = [0.75, 0.75, 0.78];

/// A target sub-domain: index into the dataset's condition list plus name.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionId {
    pub index: usize,
    pub name: String,
}

impl ConditionId {
    pub fn new(index: usize, name: impl Into<String>) -> Self {
        ConditionId {
            index,
            name: name.into(),
        }
    }
}

/// The closed set of weather transforms the generator knows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionKind {
    Clean,
    Fog,
    Rain,
    Overcast,
}

impl ConditionKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "clean" => Ok(ConditionKind::Clean),
            "fog" => Ok(ConditionKind::Fog),
            "rain" => Ok(ConditionKind::Rain),
            "overcast" => Ok(ConditionKind::Overcast),
            other => Err(Error::UnknownCondition(other.to_string())),
        }
    }
}

/// Applies a weather transform to a `[3, H, W]` image in `[0, 1]`.
///
/// * `clean`: identity.
/// * `fog`: `t * img + (1 - t) * FOG_HAZE` with `t = 1 - 0.6 * strength`.
/// * `rain`: bright slanted streaks at seeded positions, clipped to `[0, 1]`.
/// * `overcast`: darkened, desaturated blend (held out of training).
pub fn apply_condition(img: &Tensor, cond: &ConditionId, strength: f64, seed: u64) -> Result<Tensor> {
    let kind = ConditionKind::parse(&cond.name)?;
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Invalid(format!("strength {strength} outside [0, 1]")));
    }
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W] image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let hw = h * w;
    let src = img.data();
    let out = match kind {
        ConditionKind::Clean => src.to_vec(),
        ConditionKind::Fog => {
            let t = 1.0 - 0.6 * strength;
            let mut out = vec![0.0; src.len()];
            for c in 0..3 {
                let a = FOG_HAZE[c];
                for p in 0..hw {
                    out[c * hw + p] = t * src[c * hw + p] + (1.0 - t) * a;
                }
            }
            out
        }
        ConditionKind::Rain => rain(src, h, w, strength, seed),
        ConditionKind::Overcast => {
            let mut out = vec![0.0; src.len()];
            for p in 0..hw {
                let gray = (src[p] + src[hw + p] + src[2 * hw + p]) / 3.0;
                for c in 0..3 {
                    let v = (1.0 - 0.5 * strength) * src[c * hw + p] + 0.5 * strength * 0.6 * gray;
                    out[c * hw + p] = v.clamp(0.0, 1.0);
                }
            }
            out
        }
    };
    Ok(Tensor::from_vec(shape, out))
}

fn rain(src: &[f64], h: usize, w: usize, strength: f64, seed: u64) -> Vec<f64> {
    let mut out = src.to_vec();
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5241_494e);
    let streaks = (strength * (h * w) as f64 / 40.0).round() as usize;
    let gain = 0.2 + 0.3 * strength;
    let slope = 0.35;
    let mut mask = vec![false; hw];
    for _ in 0..streaks {
        let len = rng.random_range(h / 8..=h / 4).max(2);
        let x0 = rng.random_range(0.0..w as f64);
        let y0 = rng.random_range(0..h) as f64;
        for k in 0..len {
            let y = y0 + k as f64;
            let x = x0 + slope * k as f64;
            if y >= h as f64 || x >= w as f64 {
                break;
            }
            mask[y as usize * w + x as usize] = true;
        }
    }
    for (p, hit) in mask.iter().enumerate() {
        if *hit {
            for c in 0..3 {
                out[c * hw + p] = (out[c * hw + p] + gain).clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        let n = 3 * h * w;
        Tensor::from_vec(&[3, h, w], (0..n).map(|i| (i % 97) as f64 / 96.0).collect())
    }

    #[test]
    fn clean_at_zero_is_identity() {
        let img = ramp(16, 16);
        let out = apply_condition(&img, &ConditionId::new(0, "clean"), 0.0, 3).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn full_fog_is_point_four_blend() {
        let img = ramp(16, 20);
        let out = apply_condition(&img, &ConditionId::new(1, "fog"), 1.0, 3).unwrap();
        let hw = 16 * 20;
        for c in 0..3 {
            for p in 0..hw {
                let want = 0.4 * img.data()[c * hw + p] + 0.6 * FOG_HAZE[c];
                assert!((out.data()[c * hw + p] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn half_fog_matches_scalar_oracle() {
        let img = ramp(17, 19);
        let out = apply_condition(&img, &ConditionId::new(1, "fog"), 0.5, 9).unwrap();
        let t = 1.0 - 0.6 * 0.5;
        let mut i = 0;
        for c in 0..3 {
            for _y in 0..17 {
                for _x in 0..19 {
                    let want = t * img.data()[i] + (1.0 - t) * FOG_HAZE[c];
                    assert!((out.data()[i] - want).abs() <= 1e-6);
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn rain_is_seeded_and_in_range() {
        let img = ramp(32, 32);
        let c = ConditionId::new(2, "rain");
        let a = apply_condition(&img, &c, 0.8, 11).unwrap();
        let b = apply_condition(&img, &c, 0.8, 11).unwrap();
        let other = apply_condition(&img, &c, 0.8, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, img);
        assert_eq!(apply_condition(&img, &c, 0.0, 11).unwrap(), img);
    }

    #[test]
    fn unknown_condition_rejected() {
        let img = ramp(16, 16);
        let err = apply_condition(&img, &ConditionId::new(0, "snow"), 0.5, 0).unwrap_err();
        assert!(matches!(err, Error::UnknownCondition(n) if n == "snow"));
    }
}
