use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alignlab::distill::DivergenceKind;
use alignlab::encoders::Modality;
use alignlab::mmdit::TapPosition;
use alignlab::trainer::{self, AblationAxis, Checkpoint, RunConfig};
use alignlab::{selftest, Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "alignlab", version, about = "Align a multimodal encoder into a frozen diffusion transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Require bitwise determinism.
    #[arg(long)]
    strict: bool,
    #[arg(long, value_parser = parse_tap)]
    tap: Option<TapPosition>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<DivergenceKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: distill the teacher encoders into the bridge.
    TrainAlign(Common),
    /// Stage 2: train the control branch on top of a stage-1 checkpoint.
    TrainLightcontrol {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Train attention adapters on templated prompts.
    TrainLora {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train every variant along one axis and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_axis)]
        axis: AblationAxis,
    },
    /// Held-out metrics of a stage-1 checkpoint against the teacher.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Sample a latent for one prompt.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        /// Use the student path of this checkpoint instead of the teacher.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Per-modality distance to the teacher features, before and after training.
    GapReport {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Gradient, divergence and metric checks.
    Selftest,
}

fn parse_tap(s: &str) -> std::result::Result<TapPosition, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_loss(s: &str) -> std::result::Result<DivergenceKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_axis(s: &str) -> std::result::Result<AblationAxis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// File config, then flag overrides, then full validation.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(s) = common.steps {
        cfg.steps = s;
    }
    if common.strict {
        cfg.strict = true;
    }
    if let Some(t) = common.tap {
        cfg.tap = t;
    }
    if let Some(k) = common.loss {
        cfg.distill.kind = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory and echoes the resolved config into it.
fn prepare_out(common: &Common, cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let Some(dir) = &common.out else { return Ok(None) };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(Some(dir.clone()))
}

fn load(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

fn run(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::TrainAlign(common) => {
            let cfg = resolve(&common)?;
            let out = prepare_out(&common, &cfg)?;
            let run = trainer::train_align(&cfg, out.as_deref())?;
            let smoothed = run.smoothed(cfg.eval.ema_alpha);
            Ok(json!({
                "command": "train-align",
                "steps": run.log.len(),
                "initial_loss": run.log.first().map(|r| r.loss),
                "final_smoothed_loss": smoothed.last(),
                "checkpoint_hash": run.hash,
            }))
        }
        Command::TrainLightcontrol { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let stage1 = trainer::load_stage1(&cfg, &checkpoint)?;
            let out = prepare_out(&common, &cfg)?;
            let run = trainer::train_lightcontrol(&cfg, &stage1, out.as_deref())?;
            Ok(json!({"command": "train-lightcontrol", "summary": run.summary, "checkpoint_hash": run.hash}))
        }
        Command::TrainLora { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let stage1 = checkpoint.map(|p| trainer::load_stage1(&cfg, &p)).transpose()?;
            let out = prepare_out(&common, &cfg)?;
            let run = trainer::train_lora(&cfg, stage1.as_ref(), out.as_deref())?;
            Ok(json!({"command": "train-lora", "summary": run.summary, "checkpoint_hash": run.hash}))
        }
        Command::Ablate { common, axis } => {
            let cfg = resolve(&common)?;
            let out = prepare_out(&common, &cfg)?;
            let report = trainer::ablate(&cfg, axis, out.as_deref())?;
            eprint!("{}", report.table());
            Ok(serde_json::to_value(&report)?)
        }
        Command::Eval { common, checkpoint } => {
            let ckpt = load(&checkpoint)?;
            prepare_out(&common, &ckpt.config)?;
            let report = trainer::evaluate_checkpoint(&ckpt)?;
            Ok(json!({"command": "eval", "heldout": report}))
        }
        Command::Sample { common, prompt, checkpoint } => {
            let ckpt = checkpoint.as_deref().map(load).transpose()?;
            let cfg = match (&ckpt, &common.config) {
                (Some(c), None) => c.config.clone(),
                _ => resolve(&common)?,
            };
            let out = prepare_out(&common, &cfg)?;
            let latent = trainer::sample_prompt(&cfg, &prompt, ckpt.as_ref(), cfg.eval.sample_steps, cfg.seed)?;
            let value = json!({
                "command": "sample",
                "prompt": prompt,
                "student": ckpt.is_some(),
                "shape": latent.shape(),
                "latent": latent.to_f64_vec(),
            });
            if let Some(dir) = out {
                std::fs::write(dir.join("sample.json"), serde_json::to_string(&value)?)?;
            }
            Ok(value)
        }
        Command::GapReport { common, checkpoint, samples } => {
            let ckpt = load(&checkpoint)?;
            let out = prepare_out(&common, &ckpt.config)?;
            let report = trainer::modality_gap_report(&ckpt.config, &ckpt.component("alignnet."), &Modality::ALL, samples)?;
            eprint!("{}", report.table());
            if let Some(dir) = out {
                std::fs::write(dir.join("gap.json"), serde_json::to_string_pretty(&report)?)?;
            }
            Ok(serde_json::to_value(&report)?)
        }
        Command::Selftest => {
            let checks = selftest::run();
            for c in &checks {
                eprintln!("{} {:<28} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::Usage(format!("{failed} self-checks failed")));
            }
            Ok(json!({"command": "selftest", "checks": checks.len(), "failed": 0}))
        }
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    println!("{}", json!({"error": kind, "message": message}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("config", e.to_string().lines().next().unwrap_or("invalid arguments").to_string(), 2),
    };
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) if e.is_config() => fail("config", e.to_string(), 2),
        Err(e) => fail("runtime", e.to_string(), 1),
    }
}
