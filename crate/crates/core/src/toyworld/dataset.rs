use std::fs;
use std::path::{Path, PathBuf};

use dcaa_autograd::{par, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::condition::{apply_condition, ConditionId};
use super::scene::{generate_scene, Domain, Sample, SceneSpec};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: String,
    pub label: String,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strength: Option<f64>,
}

/// On-disk dataset description. Paths in `records` are relative to the
/// directory containing the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub name: String,
    pub split: Split,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Condition names; a record's condition index is its position here.
    pub conditions: Vec<String>,
    pub records: Vec<Record>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn condition_id(&self, name: &str) -> Result<ConditionId> {
        self.conditions
            .iter()
            .position(|c| c == name)
            .map(|i| ConditionId::new(i, name))
            .ok_or_else(|| Error::UnknownCondition(name.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = toml::from_str(&text).map_err(|e| Error::file(path, e))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::file(path, format!("unsupported manifest version {}", m.version)));
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for r in &m.records {
            if let Some(c) = &r.condition {
                if !m.conditions.contains(c) {
                    return Err(Error::file(path, format!("record condition `{c}` not declared")));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::file(path, e))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks that every referenced file exists.
    pub fn verify_files(&self) -> Result<()> {
        for r in &self.records {
            for f in [&r.image, &r.label] {
                let p = self.root.join(f);
                if !p.is_file() {
                    return Err(Error::file(p, "referenced file is missing"));
                }
            }
        }
        Ok(())
    }
}

/// Sizes and conditions of the generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Training sub-domains, in condition-index order.
    pub conditions: Vec<String>,
    /// Conditions that only appear in the eval split.
    pub unseen_conditions: Vec<String>,
    pub source_train: usize,
    pub source_eval: usize,
    pub target_train_per_condition: usize,
    pub target_eval_per_condition: usize,
    pub unseen_eval_per_condition: usize,
    /// Range of weather strengths for non-clean conditions.
    pub strength: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 32,
            width: 32,
            num_classes: 6,
            conditions: vec!["clean".into(), "fog".into(), "rain".into()],
            unseen_conditions: vec!["overcast".into()],
            source_train: 600,
            source_eval: 60,
            target_train_per_condition: 200,
            target_eval_per_condition: 150,
            unseen_eval_per_condition: 50,
            strength: (0.5, 1.0),
        }
    }
}

impl DataConfig {
    pub fn scene_spec(&self, domain: Domain) -> SceneSpec {
        SceneSpec {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            domain,
            ..SceneSpec::default()
        }
    }

    pub fn num_conditions(&self) -> usize {
        self.conditions.len()
    }
}

/// Manifest file names written by [`build_dataset`].
pub const SOURCE_TRAIN: &str = "source_train.toml";
pub const SOURCE_EVAL: &str = "source_eval.toml";
pub const TARGET_TRAIN: &str = "target_train.toml";
pub const TARGET_EVAL: &str = "target_eval.toml";

/// Manifests produced by one [`build_dataset`] call.
#[derive(Clone, Debug)]
pub struct BuiltDataset {
    pub source_train: DatasetManifest,
    pub source_eval: DatasetManifest,
    pub target_train: DatasetManifest,
    pub target_eval: DatasetManifest,
}

pub fn mix_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Job {
    file_stem: String,
    scene_seed: u64,
    domain: Domain,
    condition: Option<String>,
    strength: f64,
    cond_seed: u64,
}

fn render_split(
    cfg: &DataConfig,
    root: &Path,
    name: &str,
    split: Split,
    conditions: Vec<String>,
    jobs: Vec<Job>,
) -> Result<DatasetManifest> {
    let dir = root.join(name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let records = par::map_slice(&jobs, |job| -> Result<Record> {
        let spec = cfg.scene_spec(job.domain);
        let mut sample = generate_scene(job.scene_seed, &spec)?;
        if let Some(c) = &job.condition {
            let cid = ConditionId::new(0, c.clone());
            sample.image = apply_condition(&sample.image, &cid, job.strength, job.cond_seed)?;
        }
        let image = format!("{name}/{}.png", job.file_stem);
        let label = format!("{name}/{}_label.png", job.file_stem);
        save_rgb(&root.join(&image), &sample.image)?;
        save_label(&root.join(&label), &sample.label, cfg.height, cfg.width)?;
        Ok(Record {
            image,
            label,
            domain: job.domain,
            condition: job.condition.clone(),
            scene_seed: Some(job.scene_seed),
            strength: job.condition.as_ref().map(|_| job.strength),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let m = DatasetManifest {
        version: MANIFEST_VERSION,
        name: name.to_string(),
        split,
        num_classes: cfg.num_classes,
        height: cfg.height,
        width: cfg.width,
        conditions,
        records,
        root: root.to_path_buf(),
    };
    m.save(&root.join(format!("{name}.toml")))?;
    Ok(m)
}

/// Generates the source and target corpora under `root` and writes one
/// manifest per split. Target training scenes are shared across
/// conditions so sub-domains differ only by the weather transform.
pub fn build_dataset(cfg: &DataConfig, seed: u64, root: &Path) -> Result<BuiltDataset> {
    if cfg.conditions.len() < 2 {
        return Err(Error::Invalid("need at least two target conditions".into()));
    }
    cfg.scene_spec(Domain::Source).validate()?;
    let strength = |rng_seed: u64, cond: &str| -> f64 {
        if cond == "clean" {
            return 0.0;
        }
        let mut r = ChaCha8Rng::seed_from_u64(rng_seed);
        r.random_range(cfg.strength.0..=cfg.strength.1)
    };

    let source_jobs = |stream: u64, n: usize| -> Vec<Job> {
        (0..n)
            .map(|i| Job {
                file_stem: format!("{i:05}"),
                scene_seed: mix_seed(seed, stream, i as u64),
                domain: Domain::Source,
                condition: None,
                strength: 0.0,
                cond_seed: 0,
            })
            .collect()
    };
    let target_jobs = |stream: u64, n: usize, conds: &[String]| -> Vec<Job> {
        let mut jobs = Vec::new();
        for i in 0..n {
            let scene_seed = mix_seed(seed, stream, i as u64);
            for (k, c) in conds.iter().enumerate() {
                let cs = mix_seed(scene_seed, 1000 + k as u64, 0);
                jobs.push(Job {
                    file_stem: format!("{i:05}_{c}"),
                    scene_seed,
                    domain: Domain::Target,
                    condition: Some(c.clone()),
                    strength: strength(cs, c),
                    cond_seed: cs,
                });
            }
        }
        jobs
    };

    let source_train = render_split(cfg, root, "source_train", Split::Train, Vec::new(), source_jobs(1, cfg.source_train))?;
    let source_eval = render_split(cfg, root, "source_eval", Split::Eval, Vec::new(), source_jobs(2, cfg.source_eval))?;
    let target_train = render_split(
        cfg,
        root,
        "target_train",
        Split::Train,
        cfg.conditions.clone(),
        target_jobs(3, cfg.target_train_per_condition, &cfg.conditions),
    )?;
    let mut eval_jobs = target_jobs(4, cfg.target_eval_per_condition, &cfg.conditions);
    let unseen = target_jobs(5, cfg.unseen_eval_per_condition, &cfg.unseen_conditions);
    eval_jobs.extend(unseen);
    let mut eval_conditions = cfg.conditions.clone();
    eval_conditions.extend(cfg.unseen_conditions.iter().cloned());
    let target_eval = render_split(cfg, root, "target_eval", Split::Eval, eval_conditions, eval_jobs)?;
    Ok(BuiltDataset {
        source_train,
        source_eval,
        target_train,
        target_eval,
    })
}

pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("save_rgb expects [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let hw = h * w;
    let d = img.data();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = (d[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path).map_err(|e| Error::file(path, e))
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::file(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut d = vec![0.0; 3 * hw];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            d[c * hw + i] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], d))
}

pub fn save_label(path: &Path, label: &[u8], h: usize, w: usize) -> Result<()> {
    let buf = image::GrayImage::from_raw(w as u32, h as u32, label.to_vec())
        .ok_or_else(|| Error::file(path, "label buffer has wrong size"))?;
    buf.save(path).map_err(|e| Error::file(path, e))
}

pub fn load_label(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::file(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw(), h, w))
}

/// A manifest with every sample decoded in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        Self::from_manifest(manifest)
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let samples = par::map_slice(&manifest.records, |r| -> Result<Sample> {
            let ip = manifest.root.join(&r.image);
            let lp = manifest.root.join(&r.label);
            let image = load_rgb(&ip)?;
            let (label, h, w) = load_label(&lp)?;
            if (h, w) != (manifest.height, manifest.width) || image.shape()[1..] != [h, w] {
                return Err(Error::file(&ip, format!("size mismatch with manifest {}x{}", manifest.height, manifest.width)));
            }
            if let Some(bad) = label.iter().find(|&&l| l as usize > manifest.num_classes) {
                return Err(Error::file(&lp, format!("label value {bad} exceeds class count")));
            }
            let condition = r.condition.as_deref().map(|c| manifest.condition_id(c)).transpose()?;
            Ok(Sample {
                image,
                label,
                domain: r.domain,
                condition,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by condition index.
    pub fn by_condition(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.manifest.num_conditions()];
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(c) = &s.condition {
                groups[c.index].push(i);
            }
        }
        groups
    }

    /// One epoch of batches covering every sample exactly once, in an
    /// order fixed by `shuffle_seed`. The last batch may be short.
    pub fn batches(&self, batch: usize, shuffle_seed: u64) -> impl Iterator<Item = Batch> + '_ {
        assert!(batch > 0, "batch size must be positive");
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let chunks: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |idx| Batch::gather(&self.samples, &idx))
    }

    pub fn batch_of(&self, idx: &[usize]) -> Batch {
        Batch::gather(&self.samples, idx)
    }
}

/// Stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, H, W]`.
    pub images: Tensor,
    /// `B * H * W` labels.
    pub labels: Vec<u8>,
    pub conditions: Vec<Option<usize>>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn gather(samples: &[Sample], idx: &[usize]) -> Batch {
        let imgs: Vec<Tensor> = idx
            .iter()
            .map(|&i| {
                let s = &samples[i];
                let mut shape = vec![1];
                shape.extend_from_slice(s.image.shape());
                s.image.clone().reshape(&shape)
            })
            .collect();
        let mut labels = Vec::new();
        for &i in idx {
            labels.extend_from_slice(&samples[i].label);
        }
        Batch {
            images: Tensor::stack_batch(&imgs),
            labels,
            conditions: idx.iter().map(|&i| samples[i].condition.as_ref().map(|c| c.index)).collect(),
            indices: idx.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn hw(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }
}

/// Endless per-condition batch source: each condition keeps its own
/// reshuffled queue so every condition can be drawn on demand.
#[derive(Clone, Debug)]
pub struct ConditionSampler {
    groups: Vec<Vec<usize>>,
    pos: Vec<usize>,
    rng: ChaCha8Rng,
}

impl ConditionSampler {
    pub fn new(groups: Vec<Vec<usize>>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut groups = groups;
        for g in &mut groups {
            g.shuffle(&mut rng);
        }
        let pos = vec![0; groups.len()];
        ConditionSampler { groups, pos, rng }
    }

    pub fn num_conditions(&self) -> usize {
        self.groups.len()
    }

    pub fn group_len(&self, cond: usize) -> usize {
        self.groups[cond].len()
    }

    /// Next `n` indices of condition `cond`, or `None` if that condition has
    /// no samples.
    pub fn next(&mut self, cond: usize, n: usize) -> Option<Vec<usize>> {
        let g = &mut self.groups[cond];
        if g.is_empty() {
            return None;
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos[cond] == g.len() {
                g.shuffle(&mut self.rng);
                self.pos[cond] = 0;
            }
            out.push(g[self.pos[cond]]);
            self.pos[cond] += 1;
        }
        Some(out)
    }
}
