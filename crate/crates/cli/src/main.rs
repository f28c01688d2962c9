use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use dcaa_core::config::TrainConfig;
use dcaa_core::pipeline::{Block, ModelKind, Pipeline, ARTIFACT_ENV};

/// Condition-guided domain adaptation on a procedural weather world.
#[derive(Parser, Debug)]
#[command(name = "dcaa", version)]
struct Cli {
    /// TOML config; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact root.
    #[arg(long, global = true, env = ARTIFACT_ENV, default_value = "artifacts")]
    out: PathBuf,

    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,

    /// Dotted-key override such as `stage2.lambda_p=0.7`; repeatable.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render the source and target corpora.
    GenData,
    /// Train the source-only segmenter.
    TrainSource,
    /// Train the condition-guided translator.
    TrainCgst,
    /// Write stylised copies of the source set, one per condition.
    Translate,
    /// Stage 1: condition-specific adversarial training.
    TrainStage1,
    /// Stage 2: self-training from the frozen stage-1 model.
    TrainStage2 {
        /// Comma-separated thresholds; one sub-run each.
        #[arg(long = "lambda_p", alias = "lambda-p", value_delimiter = ',')]
        lambda_p: Vec<f64>,
    },
    /// Distil the stage-2 model into a single-head student.
    Distill,
    /// Score a trained model and render panels.
    Eval {
        #[arg(long, default_value = "stage2")]
        model: String,
    },
    /// Run one ablation block.
    Ablate {
        /// cam, csat, self-training, ambivalence, lambda-p or semantic-consistency.
        #[arg(long)]
        block: String,
        /// Thresholds for the lambda-p block.
        #[arg(long = "lambda_p", alias = "lambda-p", value_delimiter = ',')]
        lambda_p: Vec<f64>,
    },
    /// Every step from gen-data through eval.
    All,
    /// Print the resolved config.
    Config,
}

fn resolve(cli: &Cli) -> anyhow::Result<TrainConfig> {
    let base = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Cmd::Ablate { lambda_p, .. } = &cli.command {
        if !lambda_p.is_empty() {
            cfg.eval.lambda_p_sweep = lambda_p.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.device != "cpu" {
        bail!("device `{}` is not available; only `cpu` is supported", cli.device);
    }
    let cfg = resolve(&cli)?;
    if let Cmd::Config = cli.command {
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    let p = Pipeline::new(cfg, cli.out.clone())?;
    match &cli.command {
        Cmd::GenData => {
            p.gen_data()?;
            println!("data written to {}", p.dir("data").display());
        }
        Cmd::TrainSource => print!("{}", p.train_source()?.report.to_text()),
        Cmd::TrainCgst => {
            let o = p.train_cgst()?;
            for (c, a) in p.cfg.data.conditions.iter().zip(&o.cls_accuracy) {
                println!("cls accuracy {c}: {a:.4}");
            }
            println!("source model mIoU on translated images: {:.4}", o.fseg_translated_miou);
        }
        Cmd::Translate => {
            let m = p.translate()?;
            println!("{} stylised images", m.records.len());
        }
        Cmd::TrainStage1 => print!("{}", p.train_stage1()?.report.to_text()),
        Cmd::TrainStage2 { lambda_p } if lambda_p.is_empty() => print!("{}", p.train_stage2()?.report.to_text()),
        Cmd::TrainStage2 { lambda_p } => {
            for (v, s) in p.train_stage2_sweep(lambda_p)? {
                println!("lambda_p {v:.2}: mIoU {:.4}", s.miou());
            }
        }
        Cmd::Distill => print!("{}", p.distill()?.report.to_text()),
        Cmd::Eval { model } => {
            let (s, amb) = p.eval(ModelKind::parse(model)?)?;
            print!("{}", s.report.to_text());
            if let Some(a) = amb {
                println!(
                    "ambivalence: correct {:.4}, incorrect {:.4}, gap {:.4}",
                    a.mean_correct,
                    a.mean_incorrect,
                    a.gap()
                );
            }
        }
        Cmd::Ablate { block, .. } => {
            for (cell, m) in p.ablate(Block::parse(block)?)? {
                println!("{cell}: {m:.4}");
            }
        }
        Cmd::All => {
            p.gen_data()?;
            let src = p.train_source()?;
            p.train_cgst()?;
            p.translate()?;
            let s1 = p.train_stage1()?;
            let s2 = p.train_stage2()?;
            let st = p.distill()?;
            p.eval(ModelKind::Stage2).context("evaluating the stage-2 model")?;
            println!("source-only {:.4}", src.miou());
            println!("stage 1     {:.4}", s1.miou());
            println!("stage 2     {:.4}", s2.miou());
            println!("student     {:.4}", st.miou());
        }
        Cmd::Config => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
