mod args;
mod commands;
mod error;

use clap::Parser;

use args::{Cli, Command};
use error::CliResult;

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(error::CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| error::CliError::Usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::MakePhantom(a) => commands::make_phantom(a),
        Command::BuildAtlas(a) => commands::build_atlas_cmd(a),
        Command::TrainShapePrior(a) => commands::train_cmd(a),
        Command::Segment(a) => commands::segment(a),
        Command::Evaluate(a) => commands::evaluate(a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LESIONSEG_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("lesionseg: {e}");
        std::process::exit(e.exit_code());
    }
}
