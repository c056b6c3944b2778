use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hdpissa_cli::commands::{cmd_ablate_gamma, cmd_compare, cmd_spectrum, cmd_train, load_config};
use hdpissa_cli::config::RunConfig;
use hdpissa_cli::{CliError, CliResult};
use hdpissa_core::rankanalysis::DEFAULT_TAU;
use hdpissa_core::{Method, Precision};

#[derive(Parser)]
#[command(name = "hdpissa", version, about = "Simulate data-parallel adapter fine-tuning and analyse update ranks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method; writes loss.csv, snapshot.hdps and config.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Singular spectrum of one layer's update; writes spectrum.csv.
    Spectrum {
        /// Snapshot archive or a train output directory.
        snapshot: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare spectra of several snapshots against HD-PiSSA; writes compare.csv.
    Compare {
        #[arg(required = true, num_args = 2..)]
        snapshots: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Sweep the mute scalar; writes ablate_gamma.csv.
    AblateGamma {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1e-4,1e-8,1e-16")]
        gammas: Vec<f64>,
        #[arg(long)]
        precision: Option<Precision>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn config_with_seed(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = load_config(path)?;
    if let Some(seed) = seed {
        cfg.trainer.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> CliResult<PathBuf> {
    flag.or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set out_dir".into()))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let cfg = config_with_seed(&config, seed)?;
            let out = out_dir(out, &cfg)?;
            let r = cmd_train(&cfg, &out)?;
            println!(
                "{}: {} steps, held-out loss {:.6e} -> {:.6e}; wrote {}",
                r.method,
                r.wall_steps,
                r.eval_initial,
                r.eval_final,
                out.display()
            );
        }
        Command::Spectrum { snapshot, method, layer, tau, out } => {
            let s = cmd_spectrum(&snapshot, method, layer, tau, &out)?;
            println!("{}: effective rank {} (tau = {:e})", s.layer_label, s.effective_rank, tau);
        }
        Command::Compare { snapshots, layer, tau, out } => {
            cmd_compare(&snapshots, layer, tau, &out)?;
            println!("wrote {}", out.join(hdpissa_cli::commands::COMPARE_CSV).display());
        }
        Command::AblateGamma { config, gammas, precision, out, seed } => {
            let cfg = config_with_seed(&config, seed)?;
            let out = out_dir(out, &cfg)?;
            for row in cmd_ablate_gamma(&cfg, &gammas, precision, &out)? {
                println!(
                    "gamma {:e} ({}): final loss {:.6e}, max grad error {:.3e}, flat {}",
                    row.gamma,
                    row.precision.name(),
                    row.final_loss,
                    row.max_grad_error,
                    row.flat_curve
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
