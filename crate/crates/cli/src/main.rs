use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use marnet::commands::{self, BaselineMethod, Overrides, Sweep, SweepResult};
use marnet::error::{IoError, Result};

/// Metal artifact reduction in fan-beam CT with Fourier-convolution networks.
#[derive(Parser)]
#[command(name = "marnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Mode {
    Completion,
    EnhanceTrace,
    EnhanceProjection,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Completion => "completion",
            Mode::EnhanceTrace => "enhance_trace",
            Mode::EnhanceProjection => "enhance_projection",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Li,
    Nmar,
    Fsnmar,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Trace,
    Mask,
}

#[derive(clap::Args)]
struct Common {
    /// `key = value` config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Geometry preset (desk, ablation, fullscale) or geometry file.
    #[arg(long)]
    geometry: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired dataset directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of samples.
        #[arg(long)]
        n: Option<usize>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the three networks stage by stage into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Total steps, split 4:2:3 over the sinogram, image and fusion stages.
        #[arg(long)]
        steps: Option<usize>,
        /// Base channel width.
        #[arg(long)]
        width: Option<usize>,
        /// Samples simulated from the seed when no dataset is given.
        #[arg(long)]
        n: Option<usize>,
        /// Dataset directory written by `simulate`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        run: PathBuf,
    },
    /// Write restored sinograms and images of a trained run.
    Infer {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the run's training data.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score a trained run and the classical references; writes metrics CSVs.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Correct a dataset with a classical method.
    Baseline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Evaluate a trained run under dilated metal traces or masks.
    Robustness {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum)]
        sweep: SweepKind,
        /// Comma-separated dilation kernel sizes (0 or odd).
        #[arg(long, default_value = "0,3,5,7")]
        kernels: String,
    },
    /// Log-amplitude Fourier image of a 2-D QNT1 tensor, DC centered.
    Spectrum {
        #[arg(long)]
        input: PathBuf,
        /// Output path stem; defaults to the input without extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every registered differentiable layer.
    Gradcheck {
        /// Run every registered check (the only selection offered).
        #[arg(long)]
        all: bool,
    },
}

fn overrides(common: &Common) -> Overrides {
    Overrides { geometry: common.geometry.clone(), seed: common.seed, ..Overrides::default() }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { common, n, out } => {
            let cfg = commands::build_config(common.config.as_deref(), &Overrides { samples: n, ..overrides(&common) })?;
            let count = commands::simulate(&cfg, &out)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train { common, mode, steps, width, n, dataset, run } => {
            let ov = Overrides { mode: mode.map(|m| m.name().to_string()), steps, width, samples: n, ..overrides(&common) };
            let cfg = commands::build_config(common.config.as_deref(), &ov)?;
            let summary = commands::train(&cfg, &run, dataset.as_deref(), |s| {
                if s.step % 50 == 0 {
                    log::info!("step {} [{}] loss {:.5} lr {:.2e}", s.step, s.stage.name(), s.loss, s.lr);
                }
            })?;
            println!("trained {} steps, final loss {:.5}, checkpoint {}", summary.steps, summary.final_loss, summary.checkpoint.display());
            print_means(&summary.evaluation);
        }
        Command::Infer { run, checkpoint, dataset } => {
            let model = commands::load_model(&run, checkpoint.as_deref())?;
            let n = commands::infer(&model, dataset.as_deref())?;
            println!("wrote outputs for {n} samples under {}", run.display());
        }
        Command::Eval { run, checkpoint, dataset } => {
            let model = commands::load_model(&run, checkpoint.as_deref())?;
            print_means(&commands::eval(&model, dataset.as_deref())?);
        }
        Command::Baseline { config, method, dataset, run } => {
            let cfg = commands::build_config(config.as_deref(), &Overrides::default())?;
            let m = match method {
                Method::Li => BaselineMethod::Li,
                Method::Nmar => BaselineMethod::Nmar,
                Method::Fsnmar => BaselineMethod::Fsnmar,
            };
            print_means(&commands::baseline(&cfg, m, &dataset, &run)?);
        }
        Command::Robustness { run, checkpoint, dataset, sweep, kernels } => {
            let model = commands::load_model(&run, checkpoint.as_deref())?;
            let kind = match sweep {
                SweepKind::Trace => Sweep::Trace,
                SweepKind::Mask => Sweep::Mask,
            };
            match commands::robustness(&model, dataset.as_deref(), kind, &commands::parse_kernels(&kernels)?)? {
                SweepResult::Trace(t) => print!("{}", t.to_csv()),
                SweepResult::Mask(m) => print!("{}", m.to_csv()),
            }
        }
        Command::Spectrum { input, out } => {
            let (q, p) = commands::spectrum(&input, out.as_deref())?;
            println!("wrote {} and {}", q.display(), p.display());
        }
        Command::Gradcheck { all } => {
            if !all {
                return Err(IoError::Config("gradcheck needs --all".into()));
            }
            let reports = commands::gradcheck()?;
            let mut ok = true;
            for r in &reports {
                ok &= r.passed();
                println!("{:<24} {:.3e} (tol {:.0e}) {}", r.name, r.max_rel_error, r.tolerance, if r.passed() { "ok" } else { "FAIL" });
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn print_means(ev: &marnet_core::eval::Evaluation) {
    for m in &ev.methods {
        let s = m.mean();
        println!("{:<12} psnr {:>7.3} ssim {:.4} rmse {:.5}", m.name, s.psnr, s.ssim, s.rmse);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error[check]: one or more gradient checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(1)
        }
    }
}
