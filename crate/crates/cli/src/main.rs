mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Batch tool for a desk-scale continuous-latent language model lab.
#[derive(Parser)]
#[command(name = "latentlm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training stage and write checkpoints plus a per-step loss CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training stage (1 = text VAE, 2 = joint VAE + prior).
        #[arg(long)]
        stage: u8,
        /// Stage 2 only: start from random initialization instead of the
        /// stage-1 checkpoint.
        #[arg(long)]
        from_scratch: bool,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate text from a prompt with the trained model.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "prompt_file")]
        prompt: Option<String>,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg: Option<f64>,
        /// clean_repaint | partial_repaint:T:M | left_pad | right_pad
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_blocks: Option<usize>,
        /// Write the per-block latent trace as JSON.
        #[arg(long)]
        trace: bool,
    },
    /// ELBO/IWAE scoring of held-out items; JSON records and a CSV summary.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 16)]
        k: usize,
        /// Cap on the number of held-out items scored.
        #[arg(long, default_value_t = 8)]
        items: usize,
    },
    /// Shift scans: separable-null invariance and the shared-factor log law.
    CalibrateShift {
        #[arg(long, default_value = "4,16,64,256")]
        dims: String,
        #[arg(long, default_value_t = -12.0)]
        delta_min: f64,
        #[arg(long, default_value_t = 8.0)]
        delta_max: f64,
        #[arg(long, default_value_t = 401)]
        grid: usize,
        /// Target effective information level in nats.
        #[arg(long, default_value_t = 1.0)]
        target_mi: f64,
        /// Base logSNR of the scanned timestep.
        #[arg(long, default_value_t = -2.0)]
        lambda_star: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Likelihood–generation mismatch demonstration; JSON report.
    MismatchDemo {
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Emit the (t, pdf, lambda, alpha, sigma) table for a schedule.
    SchedulePlot {
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        t_max: f64,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Posterior logSNR and noise-robustness diagnostics of a trained VAE.
    VaeDiagnose {
        #[arg(long)]
        config: PathBuf,
        /// Which checkpoint to inspect (1 or 2).
        #[arg(long, default_value_t = 1)]
        stage: u8,
        #[arg(long, default_value_t = 16)]
        items: usize,
    },
    /// Run every oracle cross-check; non-zero exit iff any check fails.
    Verify,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };

    let outcome = match cli.command {
        Command::Train {
            config,
            stage,
            from_scratch,
            steps,
        } => commands::train(&config, stage, from_scratch, steps),
        Command::Sample {
            config,
            prompt,
            prompt_file,
            steps,
            cfg,
            strategy,
            seed,
            max_blocks,
            trace,
        } => commands::sample(
            &config,
            commands::SampleArgs {
                prompt,
                prompt_file,
                steps,
                cfg,
                strategy,
                seed,
                max_blocks,
                trace,
            },
        ),
        Command::Score { config, k, items } => commands::score(&config, k, items),
        Command::CalibrateShift {
            dims,
            delta_min,
            delta_max,
            grid,
            target_mi,
            lambda_star,
            out_dir,
        } => commands::calibrate_shift(
            &dims,
            delta_min,
            delta_max,
            grid,
            target_mi,
            lambda_star,
            &out_dir,
        ),
        Command::MismatchDemo {
            samples,
            seed,
            out_dir,
        } => commands::mismatch_demo(samples, seed, &out_dir),
        Command::SchedulePlot {
            mu,
            sigma,
            t_max,
            points,
            out,
        } => commands::schedule_plot(mu, sigma, t_max, points, &out),
        Command::VaeDiagnose {
            config,
            stage,
            items,
        } => commands::vae_diagnose(&config, stage, items),
        Command::Verify => commands::verify(),
    };

    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// 1 usage error, 3 numeric failure (verification failures exit 2 from the
/// verify command itself).
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(latentlm::Error::NonFinite { .. }) = cause.downcast_ref::<latentlm::Error>() {
            return 3;
        }
    }
    1
}
