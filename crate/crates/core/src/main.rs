use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use noisy_averaging::cli::{self, ExperimentSpec, Preset, RunOptions, SpecError};
use noisy_averaging::protocol::DisseminationMode;

#[derive(Parser)]
#[command(
    name = "noisy-avg",
    version,
    about = "Path-averaging consensus over noisy links"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or a spec file and write result files.
    Run {
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// First random stream id; sample path p uses stream-base + p.
        #[arg(long)]
        stream_base: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        mode: Option<DisseminationMode>,
    },
    /// Check a spec file and print it canonically.
    Validate { spec: PathBuf },
}

fn load(preset: Option<Preset>, spec: Option<PathBuf>) -> Result<ExperimentSpec, String> {
    match (preset, spec) {
        (Some(_), Some(_)) => Err("use either --preset or --spec, not both".into()),
        (Some(p), None) => Ok(p.defaults()),
        (None, Some(path)) => cli::validate_spec(&path).map_err(|e| e.to_string()),
        (None, None) => Err("one of --preset or --spec is required".into()),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match args.command {
        Command::Validate { spec } => match cli::validate_spec(&spec) {
            Ok(s) => {
                print!("{}", s.canonical_text());
                ExitCode::SUCCESS
            }
            Err(e @ SpecError::Io { .. }) => {
                eprintln!("error: {e}");
                ExitCode::from(3)
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Run {
            preset,
            spec,
            seed,
            stream_base,
            paths,
            out,
            workers,
            mode,
        } => {
            let mut s = match load(preset, spec) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(b) = stream_base {
                s.stream_base = b;
            }
            if let Some(p) = paths {
                s.sample_paths = p;
            }
            if let Some(m) = mode {
                s.dissemination_mode = m;
            }
            s.output_dir = cli::resolve_output_dir(
                out,
                std::env::var(cli::OUTPUT_DIR_ENV).ok(),
                &s.output_dir,
            );
            match cli::run_experiment(&s, &RunOptions { workers }) {
                Ok(result) => {
                    for path in &result.artifacts {
                        println!("{}", path.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
