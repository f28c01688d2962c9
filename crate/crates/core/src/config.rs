//! Run configuration: every hyperparameter of every stage, loaded from
//! TOML, with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Normalization;
use crate::segnet::{PredictMode, SegConfig, Variant};
use crate::toyworld::DataConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_channels: [usize; 2],
    /// Decoder feature width `D`.
    pub feat_dim: usize,
    pub att_hidden: usize,
    /// Widths of the three strided layers of every patch discriminator.
    pub disc_channels: [usize; 3],
    /// Generator widths at full and reduced resolution.
    pub gen_channels: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_channels: [16, 32],
            feat_dim: 32,
            att_hidden: 16,
            disc_channels: [32, 64, 64],
            gen_channels: [16, 32],
        }
    }
}

/// SGD with polynomial decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
}

impl SgdConfig {
    fn with_lr(lr: f64) -> Self {
        SgdConfig {
            lr,
            momentum: 0.9,
            weight_decay: 0.0005,
            power: 0.9,
        }
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig::with_lr(0.0025)
    }
}

/// Training of the source-only reference segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: SgdConfig,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            steps: 600,
            batch: 8,
            optim: SgdConfig::with_lr(0.02),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// Log-loss form, non-saturating for the generator.
    Vanilla,
    /// Least-squares form.
    LeastSquares,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgstConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_sc: f64,
    pub gan: GanMode,
}

impl Default for CgstConfig {
    fn default() -> Self {
        CgstConfig {
            steps: 500,
            batch: 8,
            lr_g: 0.0005,
            lr_d: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            lambda_sc: 5.0,
            gan: GanMode::Vanilla,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvMode {
    /// One discriminator per condition plus the CA discriminator.
    Csat,
    /// Every discriminator is a plain domain classifier.
    Dat,
    /// No adversarial term.
    None,
}

/// Discriminator optimiser (Adam).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig {
            lr: 0.0001,
            beta1: 0.9,
            beta2: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub variant: Variant,
    pub steps: usize,
    pub batch: usize,
    pub optim: SgdConfig,
    pub disc: DiscConfig,
    pub lambda_adv: f64,
    pub adv: AdvMode,
    /// Start from the source-only segmenter instead of a fresh init.
    pub init_from_source: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            variant: Variant::Cam,
            steps: 900,
            batch: 8,
            optim: SgdConfig::with_lr(0.01),
            disc: DiscConfig::default(),
            lambda_adv: 0.001,
            adv: AdvMode::Csat,
            init_from_source: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoMode {
    /// Attention-fused assignment.
    Apla,
    #[serde(rename = "maxv")]
    MaxV,
    #[serde(rename = "meanv")]
    MeanV,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLoss {
    /// Unweighted pseudo-label CE.
    Plain,
    /// Ambivalence-weighted pseudo-label CE.
    Weighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceHeads {
    /// CA head plus the active condition branch.
    All,
    CaOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch: usize,
    pub optim: SgdConfig,
    pub disc: DiscConfig,
    pub lambda_p: f64,
    pub pseudo: PseudoMode,
    pub target_loss: TargetLoss,
    pub hard_adv: bool,
    pub lambda_hard: f64,
    pub normalization: Normalization,
    pub source_heads: SourceHeads,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: 600,
            batch: 8,
            optim: SgdConfig::with_lr(0.008),
            disc: DiscConfig::default(),
            lambda_p: 0.6,
            pseudo: PseudoMode::Apla,
            target_loss: TargetLoss::Weighted,
            hard_adv: true,
            lambda_hard: 0.001,
            normalization: Normalization::Mean,
            source_heads: SourceHeads::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch: usize,
    pub optim: SgdConfig,
    pub lambda_p: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 2500,
            batch: 8,
            optim: SgdConfig::with_lr(0.03),
            lambda_p: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: PredictMode,
    /// Per-image panels written per condition.
    pub panels: usize,
    pub batch: usize,
    /// Threshold sweep run by `ablate --block lambda-p`.
    pub lambda_p_sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: PredictMode::Fused,
            panels: 2,
            batch: 32,
            lambda_p_sweep: vec![0.5, 0.6, 0.7, 0.8, 0.9],
        }
    }
}

/// Every knob of a pipeline run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub source: SourceConfig,
    pub cgst: CgstConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            source: SourceConfig::default(),
            cgst: CgstConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Applies `key.path=value` overrides. Values parse as TOML where they
    /// can (numbers, booleans, arrays) and as bare strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields at least one part");
            let mut table = &mut root;
            for p in parents {
                table = table
                    .get_mut(*p)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
            }
            if !table.contains_key(*last) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            table.insert((*last).to_string(), value);
        }
        let cfg: TrainConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.num_conditions() < 2 {
            return bad("at least 2 training conditions are required".into());
        }
        for p in [self.stage2.lambda_p, self.distill.lambda_p]
            .into_iter()
            .chain(self.eval.lambda_p_sweep.iter().copied())
        {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("lambda_p {p} outside [0, 1)"));
            }
        }
        if self.stage1.lambda_adv < 0.0 || self.stage2.lambda_hard < 0.0 || self.cgst.lambda_sc < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        for (name, b) in [
            ("source", self.source.batch),
            ("cgst", self.cgst.batch),
            ("stage1", self.stage1.batch),
            ("stage2", self.stage2.batch),
            ("distill", self.distill.batch),
            ("eval", self.eval.batch),
        ] {
            if b == 0 {
                return bad(format!("{name}.batch must be positive"));
            }
        }
        let stride = SegConfig::STRIDE * 2;
        if self.data.height % stride != 0 || self.data.width % stride != 0 {
            return bad(format!("image size must be a multiple of {stride}"));
        }
        Ok(())
    }

    pub fn seg_config(&self, variant: Variant) -> SegConfig {
        SegConfig {
            variant,
            num_classes: self.data.num_classes,
            num_conditions: self.data.num_conditions(),
            enc_channels: self.model.enc_channels,
            feat_dim: self.model.feat_dim,
            att_hidden: self.model.att_hidden,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("probe key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
