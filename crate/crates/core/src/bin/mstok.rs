use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use mstok::pipeline::commands::{self, SweepAxis};
use mstok::pipeline::RunConfig;

#[derive(Parser)]
#[command(name = "mstok", version, about = "Multi-scale flow-matching image tokenizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set stage1.max_steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (same as `--set out_dir=...`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(d) = &self.out_dir {
            overrides.push(format!("out_dir={:?}", d.display().to_string()));
        }
        let cfg = RunConfig::load(self.config.as_deref(), &overrides).context("loading configuration")?;
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Stage-1 training of encoder and multi-scale decoder.
    Train(Common),
    /// Distill a Stage-1 checkpoint into a one-step-per-scale student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Encode and decode validation images; writes a PNG grid and a JSON sidecar.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "reconstruction.png")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Score reconstructions: rFID, PSNR, SSIM and throughput.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        /// Score the validation set against itself.
        #[arg(long)]
        identity: bool,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Throughput and forward-pass counts of teacher and student.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Ablation grid over scale count, student cfg and perceptual weight.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `scales=2,3`, `cfg=1,2` or `lambda_perc=0.1,0.5,1,2`; repeatable.
        #[arg(long = "axis", value_name = "NAME=V1,V2")]
        axes: Vec<SweepAxis>,
    },
}

fn print_json<T: serde::Serialize>(value: &T, out: Option<&PathBuf>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let device = Device::Cpu;
    match cli.command {
        Command::Train(common) => {
            let cfg = common.load()?;
            let s = commands::run_train(&cfg, &device)?;
            println!("wrote {} after {} steps", s.checkpoint.display(), s.steps);
            for (step, psnr) in s.evals {
                println!("step {step}: val PSNR {psnr:.2} dB");
            }
        }
        Command::Distill { common, teacher } => {
            let cfg = common.load()?;
            let s = commands::run_distill(&cfg, &teacher, &device)?;
            println!("wrote {} after {} steps", s.checkpoint.display(), s.steps);
            for (step, psnr) in s.evals {
                println!("step {step}: student val PSNR {psnr:.2} dB");
            }
        }
        Command::Reconstruct {
            common,
            checkpoint,
            out,
            count,
        } => {
            let cfg = common.load()?;
            let side = commands::run_reconstruct(&cfg, &checkpoint, &out, count, &device)?;
            print_json(&side, None)?;
        }
        Command::Eval {
            common,
            checkpoint,
            identity,
            out,
        } => {
            let cfg = common.load()?;
            let report = commands::run_eval(&cfg, checkpoint.as_deref(), identity, &device)?;
            print_json(&report, out.as_ref())?;
        }
        Command::Bench {
            common,
            teacher,
            student,
        } => {
            let cfg = common.load()?;
            let report = commands::run_bench(&cfg, &teacher, student.as_deref(), &device)?;
            print_json(&report, None)?;
        }
        Command::Sweep { common, axes } => {
            let cfg = common.load()?;
            let rows = commands::run_sweep(&cfg, &axes, &device)?;
            println!("wrote {} rows to {}", rows.len(), cfg.out_dir.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
