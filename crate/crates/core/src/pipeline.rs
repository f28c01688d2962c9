//! End-to-end commands over an artifact directory. Every command reads
//! upstream artifacts, writes only to its own subdirectory, and stores the
//! resolved config next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::{self, BankArch, DiscBank};
use crate::checkpoint::Checkpoint;
use crate::config::{AdvMode, PseudoMode, TargetLoss, TrainConfig};
use crate::curves::Curves;
use crate::error::{Error, Result};
use crate::evalkit::{self, AmbivalenceStats, MetricReport};
use crate::plot;
use crate::segnet::{PredictMode, SegConfig, SegNet, Variant};
use crate::selftrain::{self, Teacher};
use crate::toyworld::{self, save_label, save_rgb, Dataset, DatasetManifest, Domain, Record, Split, MANIFEST_VERSION};
use crate::translator::{self, Translator, TranslatorArch};

pub const DATA_DIR: &str = "data";
pub const SOURCE_DIR: &str = "source";
pub const CGST_DIR: &str = "cgst";
pub const TRANSLATED_DIR: &str = "translated";
pub const STAGE1_DIR: &str = "stage1";
pub const STAGE2_DIR: &str = "stage2";
pub const DISTILL_DIR: &str = "distill";
pub const EVAL_DIR: &str = "eval";
pub const ABLATE_DIR: &str = "ablate";

pub const FSEG_CKPT: &str = "fseg.ckpt";
pub const TRANSLATOR_CKPT: &str = "translator.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const STYLIZED_TRAIN: &str = "stylized_train.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Environment variable naming the default artifact root.
pub const ARTIFACT_ENV: &str = "DCAA_ARTIFACTS";

/// Pipeline steps, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainSource,
    TrainCgst,
    Translate,
    TrainStage1,
    TrainStage2,
    Distill,
    Eval,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainSource => "train-source",
            Command::TrainCgst => "train-cgst",
            Command::Translate => "translate",
            Command::TrainStage1 => "train-stage1",
            Command::TrainStage2 => "train-stage2",
            Command::Distill => "distill",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
        }
    }
}

/// Which trained model `eval` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Source,
    Stage1,
    Stage2,
    Distill,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(ModelKind::Source),
            "stage1" => Ok(ModelKind::Stage1),
            "stage2" => Ok(ModelKind::Stage2),
            "distill" => Ok(ModelKind::Distill),
            o => Err(Error::Invalid(format!("unknown model `{o}` (source, stage1, stage2, distill)"))),
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            ModelKind::Source => SOURCE_DIR,
            ModelKind::Stage1 => STAGE1_DIR,
            ModelKind::Stage2 => STAGE2_DIR,
            ModelKind::Distill => DISTILL_DIR,
        }
    }

    fn command(self) -> Command {
        match self {
            ModelKind::Source => Command::TrainSource,
            ModelKind::Stage1 => Command::TrainStage1,
            ModelKind::Stage2 => Command::TrainStage2,
            ModelKind::Distill => Command::Distill,
        }
    }
}

/// Ablation blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    /// Head layouts: mix, sep, sm, cam.
    Cam,
    /// Domain-classifier vs condition-specific discriminators, both stages.
    Csat,
    /// Pseudo-label assignment: stage-1 baseline, maxv, meanv, apla.
    SelfTraining,
    /// Target losses: plain, weighted, hard-region, both.
    Ambivalence,
    /// Threshold sweep.
    LambdaP,
    /// Translator with and without the semantic-consistency term.
    SemanticConsistency,
}

impl Block {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cam" => Ok(Block::Cam),
            "csat" => Ok(Block::Csat),
            "self-training" => Ok(Block::SelfTraining),
            "ambivalence" => Ok(Block::Ambivalence),
            "lambda-p" => Ok(Block::LambdaP),
            "semantic-consistency" => Ok(Block::SemanticConsistency),
            o => Err(Error::Invalid(format!(
                "unknown ablation block `{o}` (cam, csat, self-training, ambivalence, lambda-p, semantic-consistency)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::Cam => "cam",
            Block::Csat => "csat",
            Block::SelfTraining => "self-training",
            Block::Ambivalence => "ambivalence",
            Block::LambdaP => "lambda-p",
            Block::SemanticConsistency => "semantic-consistency",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    seg: SegConfig,
    bank: Option<BankArch>,
}

/// A trained segmenter, optionally with its discriminator bank.
pub struct LoadedModel {
    pub net: SegNet,
    pub bank: Option<DiscBank>,
}

pub fn save_model(path: &Path, tag: &str, net: &SegNet, bank: Option<&DiscBank>) -> Result<()> {
    let meta = ModelMeta {
        seg: net.cfg.clone(),
        bank: bank.map(|b| b.arch.clone()),
    };
    let mut ck = Checkpoint::new(tag, &meta).with_store("seg", &net.store);
    if let Some(b) = bank {
        ck = ck.with_store("bank", &b.store);
    }
    ck.save(path)
}

pub fn load_model(path: &Path, tag: &str) -> Result<LoadedModel> {
    let ck = Checkpoint::load_tagged(path, tag)?;
    let meta: ModelMeta = ck.meta_as()?;
    let bad = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    let mut net = SegNet::new(meta.seg, 0)?;
    let seg = ck.store("seg").ok_or_else(|| bad("no `seg` store".into()))?;
    net.store.load_from(seg).map_err(|e| bad(e.to_string()))?;
    let bank = match (meta.bank, ck.store("bank")) {
        (Some(arch), Some(store)) => Some(DiscBank::from_store(arch, store)?),
        (None, _) => None,
        (Some(_), None) => return Err(bad("bank metadata without a `bank` store".into())),
    };
    Ok(LoadedModel { net, bank })
}

fn tag_for(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Source => "fseg",
        ModelKind::Stage1 => "M0",
        ModelKind::Stage2 => "M1",
        ModelKind::Distill => "student",
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, s: &str) -> Result<()> {
    fs::write(p, s).map_err(|e| Error::io(p, e))
}

/// Headline numbers of one scored model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scored {
    pub report: MetricReport,
    pub ca_only: Option<MetricReport>,
}

impl Scored {
    pub fn miou(&self) -> f64 {
        self.report.overall.miou
    }
}

/// Outputs of `train-cgst`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CgstOutcome {
    pub cls_accuracy: Vec<f64>,
    /// mIoU of the frozen source segmenter on translated source-eval images
    /// (all conditions pooled).
    pub fseg_translated_miou: f64,
}

/// Artifact root plus configuration.
pub struct Pipeline {
    pub cfg: TrainConfig,
    pub root: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: TrainConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Pipeline { cfg, root: root.into() })
    }

    pub fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn require(&self, rel: &str, cmd: Command) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Missing {
                artifact: p,
                command: cmd.name().to_string(),
            })
        }
    }

    fn begin(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        self.cfg.save(&dir.join(CONFIG_FILE))
    }

    fn seen(&self) -> Vec<String> {
        self.cfg.data.conditions.clone()
    }

    fn load_split(&self, name: &str) -> Result<Dataset> {
        let p = self.require(&format!("{DATA_DIR}/{name}"), Command::GenData)?;
        Dataset::load(&p)
    }

    fn load_stylized(&self) -> Result<Dataset> {
        let p = self.require(&format!("{TRANSLATED_DIR}/{STYLIZED_TRAIN}"), Command::Translate)?;
        Dataset::load(&p)
    }

    fn load_kind(&self, kind: ModelKind) -> Result<LoadedModel> {
        let rel = format!("{}/{}", kind.dir(), if kind == ModelKind::Source { FSEG_CKPT } else { MODEL_CKPT });
        let p = self.require(&rel, kind.command())?;
        load_model(&p, tag_for(kind))
    }

    fn translator_arch(&self) -> TranslatorArch {
        TranslatorArch {
            num_conditions: self.cfg.data.num_conditions(),
            gen_channels: self.cfg.model.gen_channels,
            disc_channels: self.cfg.model.disc_channels,
        }
    }

    fn score(&self, net: &SegNet, out: &Path) -> Result<Scored> {
        let eval = self.load_split(toyworld::TARGET_EVAL)?;
        let report = evalkit::evaluate(net, &eval, self.cfg.eval.mode, self.cfg.eval.batch, &self.seen())?;
        write_text(&out.join(METRICS_CSV), &report.to_csv())?;
        write_text(&out.join("metrics.txt"), &report.to_text())?;
        let ca_only = if net.variant() == Variant::Cam && self.cfg.eval.mode != PredictMode::CaOnly {
            let r = evalkit::evaluate(net, &eval, PredictMode::CaOnly, self.cfg.eval.batch, &self.seen())?;
            write_text(&out.join("metrics_ca_only.csv"), &r.to_csv())?;
            Some(r)
        } else {
            None
        };
        let cats: Vec<String> = report.per_condition.iter().map(|r| r.name.clone()).collect();
        let vals: Vec<f64> = report.per_condition.iter().map(|r| r.miou).collect();
        plot::write(&out.join("miou.svg"), &plot::bars_svg("mIoU per condition", &cats, &[("model".into(), vals)]))?;
        Ok(Scored { report, ca_only })
    }

    fn finish_curves(&self, curves: &Curves, out: &Path, title: &str) -> Result<()> {
        curves.write_csv(&out.join("curves.csv"))?;
        plot::write(&out.join("curves.svg"), &plot::curves_svg(curves, title))
    }

    /// Generates the source and target corpora.
    pub fn gen_data(&self) -> Result<toyworld::BuiltDataset> {
        let dir = self.dir(DATA_DIR);
        self.begin(&dir)?;
        toyworld::build_dataset(&self.cfg.data, self.cfg.seed, &dir)
    }

    /// Trains the source-only segmenter (also the translator's frozen
    /// reference) and scores it on the target eval split.
    pub fn train_source(&self) -> Result<Scored> {
        let data = self.load_split(toyworld::SOURCE_TRAIN)?;
        let out = self.dir(SOURCE_DIR);
        self.begin(&out)?;
        let s = &self.cfg.source;
        let mut net = SegNet::new(self.cfg.seg_config(Variant::Mix), toyworld::mix_seed(self.cfg.seed, 100, 0))?;
        let mut curves = Curves::new();
        adversarial::train_supervised(&s.optim, s.steps, s.batch, &mut net, &data, self.cfg.seed, &mut curves)?;
        save_model(&out.join(FSEG_CKPT), "fseg", &net, None)?;
        self.finish_curves(&curves, &out, "source-only segmenter")?;
        self.score(&net, &out)
    }

    /// Trains the condition-guided translator against the frozen source
    /// segmenter and writes its diagnostics into `out`.
    pub fn train_cgst_into(&self, out: &Path) -> Result<CgstOutcome> {
        let fseg = self.load_kind(ModelKind::Source)?.net;
        let source = self.load_split(toyworld::SOURCE_TRAIN)?;
        let target = self.load_split(toyworld::TARGET_TRAIN)?;
        let source_eval = self.load_split(toyworld::SOURCE_EVAL)?;
        create_dir(out)?;
        self.cfg.save(&out.join(CONFIG_FILE))?;
        let mut tr = Translator::new(self.translator_arch(), toyworld::mix_seed(self.cfg.seed, 101, 0));
        let mut curves = Curves::new();
        let before = fseg.store.checksum();
        translator::train_translator(&self.cfg.cgst, &mut tr, &fseg, &source, &target, self.cfg.seed, &mut curves)?;
        if fseg.store.checksum() != before {
            return Err(Error::Invalid("reference segmenter changed during translator training".into()));
        }
        Checkpoint::new("cgst", &tr.arch)
            .with_store("gen", &tr.gen_store)
            .with_store("disc", &tr.disc_store)
            .save(&out.join(TRANSLATOR_CKPT))?;
        self.finish_curves(&curves, out, "translator")?;
        let cls_accuracy = translator::translated_cls_accuracy(&tr, &source_eval, self.cfg.eval.batch)?;
        let fseg_translated_miou = fseg_on_translated(&tr, &fseg, &source_eval, self.cfg.eval.batch)?;
        let mut csv = String::from("condition,cls_accuracy\n");
        for (c, a) in self.cfg.data.conditions.iter().zip(&cls_accuracy) {
            csv.push_str(&format!("{c},{a:.6}\n"));
        }
        write_text(&out.join("cls_accuracy.csv"), &csv)?;
        write_text(
            &out.join("fseg_translated.csv"),
            &format!("lambda_sc,miou\n{:.6},{fseg_translated_miou:.6}\n", self.cfg.cgst.lambda_sc),
        )?;
        Ok(CgstOutcome {
            cls_accuracy,
            fseg_translated_miou,
        })
    }

    pub fn train_cgst(&self) -> Result<CgstOutcome> {
        self.train_cgst_into(&self.dir(CGST_DIR))
    }

    fn load_translator(&self) -> Result<Translator> {
        let p = self.require(&format!("{CGST_DIR}/{TRANSLATOR_CKPT}"), Command::TrainCgst)?;
        let ck = Checkpoint::load_tagged(&p, "cgst")?;
        let arch: TranslatorArch = ck.meta_as()?;
        let missing = |s: &str| Error::Checkpoint {
            path: p.clone(),
            msg: format!("no `{s}` store"),
        };
        Translator::from_stores(
            arch,
            ck.store("gen").ok_or_else(|| missing("gen"))?,
            ck.store("disc").ok_or_else(|| missing("disc"))?,
        )
    }

    /// Writes one stylised copy of the labelled source set per condition.
    pub fn translate(&self) -> Result<DatasetManifest> {
        let tr = self.load_translator()?;
        let source = self.load_split(toyworld::SOURCE_TRAIN)?;
        let out = self.dir(TRANSLATED_DIR);
        self.begin(&out)?;
        let conds = self.cfg.data.conditions.clone();
        let (h, w) = (self.cfg.data.height, self.cfg.data.width);
        let mut records = Vec::new();
        let img_dir = out.join("images");
        create_dir(&img_dir)?;
        let idx: Vec<usize> = (0..source.len()).collect();
        for (ci, c) in conds.iter().enumerate() {
            for chunk in idx.chunks(self.cfg.eval.batch) {
                let b = source.batch_of(chunk);
                let y = tr.translate(&b.images, &vec![ci; chunk.len()])?;
                for (j, &i) in chunk.iter().enumerate() {
                    let image = format!("images/{i:05}_{c}.png");
                    let label = format!("images/{i:05}_label.png");
                    save_rgb(&out.join(&image), &y.batch_item(j).reshape(&[3, h, w]))?;
                    if ci == 0 {
                        save_label(&out.join(&label), &source.samples[i].label, h, w)?;
                    }
                    records.push(Record {
                        image,
                        label,
                        domain: Domain::Source,
                        condition: Some(c.clone()),
                        scene_seed: source.manifest.records[i].scene_seed,
                        strength: None,
                    });
                }
            }
        }
        let m = DatasetManifest {
            version: MANIFEST_VERSION,
            name: "stylized_train".into(),
            split: Split::Train,
            num_classes: self.cfg.data.num_classes,
            height: h,
            width: w,
            conditions: conds,
            records,
            root: out.clone(),
        };
        m.save(&out.join(STYLIZED_TRAIN))?;
        Ok(m)
    }

    /// Stage 1 into `out` with the given config.
    pub fn stage1_into(&self, cfg: &TrainConfig, out: &Path) -> Result<Scored> {
        let stylized = self.load_stylized()?;
        let target = self.load_split(toyworld::TARGET_TRAIN)?;
        create_dir(out)?;
        cfg.save(&out.join(CONFIG_FILE))?;
        let s1 = &cfg.stage1;
        let seg_cfg = cfg.seg_config(s1.variant);
        let mut net = SegNet::new(seg_cfg, toyworld::mix_seed(cfg.seed, 102, 0))?;
        if s1.init_from_source {
            let fseg = self.load_kind(ModelKind::Source)?.net;
            init_from_source(&mut net, &fseg)?;
        }
        let arch = BankArch::for_variant(
            s1.variant,
            cfg.data.num_classes,
            cfg.data.num_conditions(),
            cfg.model.disc_channels,
        );
        let mut bank = DiscBank::new(arch, toyworld::mix_seed(cfg.seed, 103, 0));
        let mut curves = Curves::new();
        adversarial::train_stage1(s1, &mut net, &mut bank, &stylized, &target, cfg.seed, &mut curves)?;
        save_model(&out.join(MODEL_CKPT), "M0", &net, Some(&bank))?;
        self.finish_curves(&curves, out, "stage 1")?;
        self.score(&net, out)
    }

    pub fn train_stage1(&self) -> Result<Scored> {
        self.stage1_into(&self.cfg, &self.dir(STAGE1_DIR))
    }

    /// Stage 2 from the M0 checkpoint in `stage1_dir` into `out`.
    pub fn stage2_into(&self, cfg: &TrainConfig, stage1_dir: &Path, out: &Path) -> Result<Scored> {
        let ck = stage1_dir.join(MODEL_CKPT);
        if !ck.exists() {
            return Err(Error::Missing {
                artifact: ck,
                command: Command::TrainStage1.name().into(),
            });
        }
        let m0 = load_model(&ck, "M0")?;
        let stylized = self.load_stylized()?;
        let target = self.load_split(toyworld::TARGET_TRAIN)?;
        create_dir(out)?;
        cfg.save(&out.join(CONFIG_FILE))?;
        let teacher_bank = m0
            .bank
            .ok_or_else(|| Error::Invalid("M0 checkpoint has no discriminator bank".into()))?;
        let mut student = m0.net.clone();
        let mut bank = teacher_bank.clone();
        let teacher = Teacher {
            net: &m0.net,
            bank: Some(&teacher_bank),
        };
        let mut curves = Curves::new();
        selftrain::train_stage2(&cfg.stage2, &teacher, &mut student, &mut bank, &stylized, &target, cfg.seed, &mut curves)?;
        save_model(&out.join(MODEL_CKPT), "M1", &student, Some(&bank))?;
        self.finish_curves(&curves, out, "stage 2")?;
        self.score(&student, out)
    }

    pub fn train_stage2(&self) -> Result<Scored> {
        self.stage2_into(&self.cfg, &self.dir(STAGE1_DIR), &self.dir(STAGE2_DIR))
    }

    /// Runs stage 2 once per threshold into `stage2/lambda_p_<v>/`.
    pub fn train_stage2_sweep(&self, values: &[f64]) -> Result<Vec<(f64, Scored)>> {
        let mut out = Vec::new();
        for &v in values {
            let mut cfg = self.cfg.clone();
            cfg.stage2.lambda_p = v;
            cfg.validate()?;
            let dir = self.dir(STAGE2_DIR).join(format!("lambda_p_{v:.2}"));
            out.push((v, self.stage2_into(&cfg, &self.dir(STAGE1_DIR), &dir)?));
        }
        Ok(out)
    }

    /// Distils the stage-2 model into a single-head student.
    pub fn distill(&self) -> Result<Scored> {
        let teacher = self.load_kind(ModelKind::Stage2)?.net;
        let stylized = self.load_stylized()?;
        let target = self.load_split(toyworld::TARGET_TRAIN)?;
        let out = self.dir(DISTILL_DIR);
        self.begin(&out)?;
        let mut student = selftrain::student_from(&teacher, toyworld::mix_seed(self.cfg.seed, 104, 0))?;
        let mut curves = Curves::new();
        selftrain::distill_student(&self.cfg.distill, &teacher, &mut student, &stylized, &target, self.cfg.seed, &mut curves)?;
        save_model(&out.join(MODEL_CKPT), "student", &student, None)?;
        self.finish_curves(&curves, &out, "distillation")?;
        write_text(
            &out.join("params.csv"),
            &format!("model,params\nteacher,{}\nstudent,{}\n", teacher.param_count(), student.param_count()),
        )?;
        self.score(&student, &out)
    }

    /// Full report for one trained model: metrics, ambivalence consistency
    /// (models with a CA discriminator), and per-image panels.
    pub fn eval(&self, kind: ModelKind) -> Result<(Scored, Option<AmbivalenceStats>)> {
        let m = self.load_kind(kind)?;
        let eval = self.load_split(toyworld::TARGET_EVAL)?;
        let out = self.dir(EVAL_DIR).join(kind.dir());
        self.begin(&out)?;
        let scored = self.score(&m.net, &out)?;
        let stats = match (&m.bank, m.net.variant()) {
            (Some(bank), Variant::Cam) => {
                let s = evalkit::ambivalence_consistency(&m.net, bank, &eval, self.cfg.eval.batch)?;
                write_text(
                    &out.join("ambivalence.csv"),
                    &format!(
                        "mean_correct,mean_incorrect,gap,point_biserial,correct_pixels,incorrect_pixels\n{:.6},{:.6},{:.6},{:.6},{},{}\n",
                        s.mean_correct,
                        s.mean_incorrect,
                        s.gap(),
                        s.point_biserial,
                        s.correct_pixels,
                        s.incorrect_pixels
                    ),
                )?;
                Some(s)
            }
            _ => None,
        };
        evalkit::write_panels(
            &out.join("panels"),
            &m.net,
            m.bank.as_ref(),
            &eval,
            self.cfg.stage2.lambda_p,
            self.cfg.eval.panels,
        )?;
        Ok((scored, stats))
    }

    /// Expands one ablation block into cells under `ablate/<block>/` and
    /// writes a summary table and bar plot.
    pub fn ablate(&self, block: Block) -> Result<Vec<(String, f64)>> {
        let base = self.dir(ABLATE_DIR).join(block.name());
        create_dir(&base)?;
        self.cfg.save(&base.join(CONFIG_FILE))?;
        let mut cells: Vec<(String, MetricReport)> = Vec::new();
        let stage1_dir = self.dir(STAGE1_DIR);
        let with = |f: &dyn Fn(&mut TrainConfig)| -> Result<TrainConfig> {
            let mut c = self.cfg.clone();
            f(&mut c);
            c.validate()?;
            Ok(c)
        };
        match block {
            Block::Cam => {
                for v in [Variant::Mix, Variant::Sep, Variant::Sm, Variant::Cam] {
                    let cfg = with(&|c| c.stage1.variant = v)?;
                    let s = self.stage1_into(&cfg, &base.join(v.name()))?;
                    cells.push((v.name().into(), s.report));
                }
            }
            Block::Csat => {
                for (name, mode) in [("dat", AdvMode::Dat), ("csat", AdvMode::Csat)] {
                    let cfg = with(&|c| c.stage1.adv = mode)?;
                    let s1 = base.join(format!("{name}-s1"));
                    let r1 = self.stage1_into(&cfg, &s1)?;
                    cells.push((format!("{name}-s1"), r1.report));
                    let r2 = self.stage2_into(&cfg, &s1, &base.join(format!("{name}-s2")))?;
                    cells.push((format!("{name}-s2"), r2.report));
                }
            }
            Block::SelfTraining => {
                let m0 = self.load_kind(ModelKind::Stage1)?;
                let r = self.score(&m0.net, &{
                    let d = base.join("baseline");
                    create_dir(&d)?;
                    d
                })?;
                cells.push(("baseline".into(), r.report));
                for (name, mode) in [("maxv", PseudoMode::MaxV), ("meanv", PseudoMode::MeanV), ("apla", PseudoMode::Apla)] {
                    let cfg = with(&|c| c.stage2.pseudo = mode)?;
                    let s = self.stage2_into(&cfg, &stage1_dir, &base.join(name))?;
                    cells.push((name.into(), s.report));
                }
            }
            Block::Ambivalence => {
                for (name, loss, hard) in [
                    ("plain", TargetLoss::Plain, false),
                    ("weighted", TargetLoss::Weighted, false),
                    ("hard", TargetLoss::Plain, true),
                    ("weighted+hard", TargetLoss::Weighted, true),
                ] {
                    let cfg = with(&|c| {
                        c.stage2.target_loss = loss;
                        c.stage2.hard_adv = hard;
                    })?;
                    let s = self.stage2_into(&cfg, &stage1_dir, &base.join(name))?;
                    cells.push((name.into(), s.report));
                }
            }
            Block::LambdaP => {
                for &v in &self.cfg.eval.lambda_p_sweep {
                    let cfg = with(&|c| c.stage2.lambda_p = v)?;
                    let name = format!("lambda_p_{v:.2}");
                    let s = self.stage2_into(&cfg, &stage1_dir, &base.join(&name))?;
                    cells.push((name, s.report));
                }
            }
            Block::SemanticConsistency => {
                let mut rows = String::from("cell,lambda_sc,fseg_translated_miou,min_cls_accuracy\n");
                let mut out = Vec::new();
                for (name, l) in [("lambda_sc_5", self.cfg.cgst.lambda_sc), ("lambda_sc_0", 0.0)] {
                    let cfg = with(&|c| c.cgst.lambda_sc = l)?;
                    let sub = Pipeline::new(cfg, self.root.clone())?;
                    let o = sub.train_cgst_into(&base.join(name))?;
                    let min_acc = o.cls_accuracy.iter().cloned().fold(f64::INFINITY, f64::min);
                    rows.push_str(&format!("{name},{l:.6},{:.6},{min_acc:.6}\n", o.fseg_translated_miou));
                    out.push((name.to_string(), o.fseg_translated_miou));
                }
                write_text(&base.join("summary.csv"), &rows)?;
                return Ok(out);
            }
        }
        let mut csv = String::from("cell,miou");
        let conds: Vec<String> = cells
            .first()
            .map(|c| c.1.per_condition.iter().map(|r| r.name.clone()).collect())
            .unwrap_or_default();
        for c in &conds {
            csv.push_str(&format!(",{c}"));
        }
        csv.push('\n');
        for (name, r) in &cells {
            csv.push_str(&format!("{name},{:.6}", r.overall.miou));
            for pc in &r.per_condition {
                csv.push_str(&format!(",{:.6}", pc.miou));
            }
            csv.push('\n');
        }
        write_text(&base.join("summary.csv"), &csv)?;
        let mut cats = vec!["all".to_string()];
        cats.extend(conds);
        let series: Vec<(String, Vec<f64>)> = cells
            .iter()
            .map(|(n, r)| {
                let mut v = vec![r.overall.miou];
                v.extend(r.per_condition.iter().map(|p| p.miou));
                (n.clone(), v)
            })
            .collect();
        plot::write(&base.join("summary.svg"), &plot::bars_svg(&format!("ablation: {}", block.name()), &cats, &series))?;
        Ok(cells.into_iter().map(|(n, r)| (n, r.overall.miou)).collect())
    }
}

/// Copies the source segmenter's encoder into `net` and its decoder into
/// every decoder branch (and the CA classifier where shapes agree).
pub fn init_from_source(net: &mut SegNet, fseg: &SegNet) -> Result<()> {
    let map = |e: dcaa_autograd::StoreError| Error::Invalid(format!("initialising from the source model: {e}"));
    match net.variant() {
        Variant::Mix => net.store.load_from(&fseg.store).map_err(map)?,
        Variant::Sm | Variant::Cam => {
            net.store.copy_prefix(&fseg.store, "enc.", "enc.").map_err(map)?;
            for i in 0..net.cfg.num_conditions {
                net.store.copy_prefix(&fseg.store, "dec.", &format!("dec{i}.")).map_err(map)?;
            }
        }
        Variant::Sep => {
            for i in 0..net.cfg.num_conditions {
                net.store.copy_prefix(&fseg.store, "enc.", &format!("enc{i}.")).map_err(map)?;
                net.store.copy_prefix(&fseg.store, "dec.", &format!("dec{i}.")).map_err(map)?;
            }
        }
    }
    Ok(())
}

/// mIoU of `fseg` on `source` images translated toward every condition.
pub fn fseg_on_translated(tr: &Translator, fseg: &SegNet, source: &Dataset, batch: usize) -> Result<f64> {
    let k = tr.num_conditions();
    let mut conf = evalkit::Confusion::new(fseg.cfg.num_classes);
    let idx: Vec<usize> = (0..source.len()).collect();
    for c in 0..k {
        for chunk in idx.chunks(batch.max(1)) {
            let b = source.batch_of(chunk);
            let y = tr.translate(&b.images, &vec![c; chunk.len()])?;
            let p = fseg.predict(&y, PredictMode::Fused)?;
            conf.add(&crate::segnet::argmax_labels(&p), &b.labels)?;
        }
    }
    Ok(evalkit::miou(&conf).1)
}
