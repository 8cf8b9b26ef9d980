use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shadowfree::config::Config;
use shadowfree::pipeline;
use shadowfree::{Error, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "shadowfree", version, about = "Mask-free shadow removal: data, training, inference, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Starting preset: desk, tiny or full.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// TOML file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override applied last, e.g. `train.lr=3e-4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut cfg = Config::preset(&self.preset)?;
        if let Some(p) = &self.config {
            cfg = cfg.merge_file(p)?;
        }
        cfg = cfg.with_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg = cfg.with_overrides(&[format!("train.seed={s}")])?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic shadow / shadow-free pairs and a manifest.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// Training pairs.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Held-out pairs.
        #[arg(long, default_value_t = 40)]
        test_count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Train both branches on `<data>/train`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint into the same output directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Shorthand for `--set train.max_steps=N`.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Restore every PNG in a directory with a checkpoint's EMA weights.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reverse diffusion steps (default: the checkpoint's `diffusion.sample_steps`).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// PSNR / SSIM of predictions against ground truth, matched by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report file; defaults to `<out>/reports/eval.tsv`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long)]
        force: bool,
    },
    /// Synthetic data, 50 training steps, inference and evaluation in one go.
    Smoke {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn report_path(report: Option<PathBuf>, out: Option<PathBuf>) -> Result<PathBuf> {
    match (report, out) {
        (Some(r), _) => Ok(r),
        (None, Some(o)) => Ok(o.join(pipeline::REPORTS_DIR).join(pipeline::EVAL_REPORT)),
        (None, None) => Err(Error::validation("eval needs --report or --out")),
    }
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeSynthetic {
            out,
            count,
            test_count,
            size,
            seed,
            force,
        } => {
            pipeline::make_synthetic(&out, count, test_count, size, seed, force)?;
            println!("wrote {count} train + {test_count} test pairs to {}", show(&out));
        }
        Command::Train {
            data,
            out,
            resume,
            steps,
            force,
            cfg,
        } => {
            let mut config = cfg.resolve()?;
            if let Some(s) = steps {
                config = config.with_overrides(&[format!("train.max_steps={s}")])?;
            }
            let s = pipeline::train(&config, &data, &out, resume.as_deref(), force)?;
            if let Some(m) = s.metrics.last() {
                println!("step {} L_total {:.6}", m.step, m.l_total);
            }
            println!("checkpoint {}", show(&s.last_checkpoint));
        }
        Command::Infer {
            checkpoint,
            input,
            out,
            steps,
            seed,
            force,
        } => {
            let s = pipeline::infer(&checkpoint, &input, &out, steps, seed, None, force)?;
            println!("restored {} images, {} rejected", s.records.len(), s.rejects.len());
        }
        Command::Eval {
            pred,
            gt,
            report,
            out,
            resolution,
            force,
        } => {
            let path = report_path(report, out)?;
            let r = pipeline::eval(&pred, &gt, resolution, &path, force)?;
            println!(
                "{} images: PSNR {:.3} dB, SSIM {:.4}; report {}",
                r.rows.len(),
                r.mean_psnr,
                r.mean_ssim,
                show(&path)
            );
        }
        Command::Smoke { out, force, cfg } => {
            let config = cfg.resolve()?;
            let s = pipeline::smoke(&config, &out, force)?;
            println!(
                "smoke ok: smoothed loss {:.5} -> {:.5}; PSNR {:.3} dB, SSIM {:.4}",
                s.smoothed_first, s.smoothed_last, s.report.mean_psnr, s.report.mean_ssim
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_VALIDATION) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
