//! gnwd command-line pipeline: dataset generation, denoiser and alignment
//! training, guided sampling, evaluation, and the analytic oracle check.

pub mod ops;
pub mod pgm;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "gnwd",
    about = "Guided nowcasting with diffusion: simulate, train, sample, verify",
    version
)]
pub struct Cli {
    /// Structured-text config file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Run seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (0 = auto); GNWD_THREADS is honored when unset.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Output directory override.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the gravitational digit-motion train/test datasets.
    GenNbody,
    /// Train the conditional denoiser on the train split.
    Train {
        /// Continue from an existing checkpoint, keeping the step counter.
        #[arg(long)]
        resume: bool,
    },
    /// Train the constraint regressor (and, for energy, the detector).
    TrainAlign,
    /// Sample forecast ensembles over the test split.
    Sample {
        /// Ensemble members per test sample.
        #[arg(long)]
        ensemble: Option<usize>,
        /// Guidance scale; 0 samples unguided.
        #[arg(long)]
        lambda: Option<f64>,
        /// Anticipated-intensity offset in residual standard deviations.
        #[arg(long)]
        n: Option<f64>,
    },
    /// Score predictions against the test split.
    Evaluate {
        /// Predictions directory (defaults to <out>/samples).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run the analytic sampler/guidance checks; exits nonzero on failure.
    OracleCheck,
}

impl Cli {
    pub fn overrides(&self) -> ops::Overrides {
        let mut ov = ops::Overrides {
            seed: self.seed,
            workers: self.workers,
            out: self.out.clone(),
            ..Default::default()
        };
        if let Command::Sample { ensemble, lambda, n } = &self.command {
            ov.ensemble = *ensemble;
            ov.lambda = *lambda;
            ov.n_sigma = *n;
        }
        ov
    }
}
