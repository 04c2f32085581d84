mod bank;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mergemix::ErrorKind;

#[derive(Parser)]
#[command(name = "mergemix", version, about = "Select dataset mixtures by scoring merged models")]
struct Cli {
    /// Worker threads for search and bench (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Average checkpoints into one.
    Merge(commands::MergeArgs),
    /// Score the merged model of every mixture of a bank on a target.
    Search(commands::SearchArgs),
    /// Score mixtures by embedding similarity to a target.
    Similarity(commands::SimilarityArgs),
    /// Per-task Pearson correlation of surrogate/ground-truth pairs.
    Correlate(commands::CorrelateArgs),
    /// Run the synthetic benchmark end to end.
    Bench(commands::BenchArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mergemix::Error>() {
            return match e.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Io => 2,
                ErrorKind::Evaluator => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MERGEMIX_LOG", "warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }

    let result = match cli.command {
        Command::Merge(args) => commands::merge(args),
        Command::Search(args) => commands::search(args),
        Command::Similarity(args) => commands::similarity(args),
        Command::Correlate(args) => commands::correlate(args),
        Command::Bench(args) => commands::bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
