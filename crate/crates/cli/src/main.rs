use clap::Parser;
use gnwd_cli::{ops, Cli, Command};

fn main() {
    let cli = Cli::parse();
    let overrides = cli.overrides();
    let result = (|| -> anyhow::Result<bool> {
        let cfg = ops::load_config(cli.config.as_deref(), &overrides)?;
        ops::init_workers(cfg.run.workers);
        match &cli.command {
            Command::GenNbody => {
                ops::gen_nbody::run(&cfg)?;
            }
            Command::Train { resume } => {
                ops::train::run(&cfg, *resume)?;
            }
            Command::TrainAlign => {
                ops::train_align::run(&cfg)?;
            }
            Command::Sample { .. } => {
                ops::sample::run(&cfg)?;
            }
            Command::Evaluate { predictions } => {
                ops::evaluate::run(&cfg, predictions.as_deref())?;
            }
            Command::OracleCheck => {
                let outcome = ops::oracle_check::run(&cfg)?;
                ops::oracle_check::print_outcome(&outcome);
                return Ok(outcome.passed());
            }
        }
        Ok(true)
    })();
    match result {
        Ok(true) => {}
        Ok(false) => std::process::exit(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}
