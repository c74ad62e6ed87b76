//! `chocosim` command-line driver.
//!
//! Exit codes: 0 on success, 2 when a spec fails validation, 3 on any
//! other error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chocosim::harness::{self, presets, ExperimentSpec, RunOptions};
use chocosim::Error;

#[derive(Parser)]
#[command(
    name = "chocosim",
    version,
    about = "Decentralized SGD / CHOCO-SGD experiment simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results under the output directory.
    Run(RunArgs),
    /// List the built-in experiment presets.
    ListPresets,
    /// Print the TOML source of a preset.
    ShowPreset { name: String },
    /// Check a spec file without running it.
    Validate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Print the aggregate table of a finished experiment.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec in TOML.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// Name of a built-in preset.
    #[arg(long)]
    preset: Option<String>,
    /// Results root; each experiment gets a subdirectory named after it.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Re-run cells that already completed.
    #[arg(long)]
    force: bool,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the number of trials.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn load_spec(args: &RunArgs) -> chocosim::Result<ExperimentSpec> {
    let mut spec = match (&args.spec, &args.preset) {
        (Some(path), _) => ExperimentSpec::from_file(path)?,
        (None, Some(name)) => presets::preset(name)?,
        (None, None) => {
            return Err(Error::Config(
                "one of --spec or --preset is required".into(),
            ))
        }
    };
    if let Some(t) = args.trials {
        spec.trials = t;
    }
    if let Some(s) = args.seed {
        spec.master_seed = s;
    }
    Ok(spec)
}

fn run(args: RunArgs) -> chocosim::Result<()> {
    let spec = load_spec(&args)?;
    let opts = RunOptions {
        out_dir: Some(args.out),
        force: args.force,
        threads: args.threads,
    };
    let result = harness::run_experiment(&spec, &opts)?;
    let reused: usize = result
        .cells
        .iter()
        .flat_map(|c| &c.trials)
        .filter(|t| t.reused)
        .count();
    let total: usize = result.cells.iter().map(|c| c.trials.len()).sum();
    let dir = result.dir.as_ref().expect("output directory set");
    eprintln!(
        "{}: {total} runs ({reused} reused) in {}",
        spec.name,
        dir.display()
    );
    print!("{}", harness::report(dir)?);
    Ok(())
}

fn dispatch(cli: Cli) -> chocosim::Result<()> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::ListPresets => {
            for (name, about) in presets::list() {
                println!("{name:<16} {about}");
            }
            Ok(())
        }
        Command::ShowPreset { name } => {
            let src = presets::source(&name)
                .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
            print!("{src}");
            Ok(())
        }
        Command::Validate { spec } => {
            let spec = ExperimentSpec::from_file(&spec)?;
            let cells = spec.validate()?;
            println!(
                "{}: ok ({} cells x {} trials)",
                spec.name,
                cells.len(),
                spec.trials
            );
            Ok(())
        }
        Command::Report { dir } => {
            print!("{}", harness::report(&dir)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_validation() => {
            eprintln!("invalid spec: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
