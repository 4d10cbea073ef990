use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eos_lab::config::{DatasetConfig, ExperimentConfig, Recipe};
use eos_lab::{fetch, LabError, RunOptions};

#[derive(Parser, Debug)]
#[command(name = "eos-lab", version, about = "Edge-of-stability experiment recipes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the recipe named in the config.
    Run(RunArgs),
    /// Download the dataset and check or write its manifest.
    FetchData {
        /// Base URL serving the four gzipped IDX files.
        #[arg(long)]
        url: String,
        /// Target directory (defaults to the config's dataset dir).
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the default config for a recipe.
    Schema { recipe: String },
    DlnPhaseMap(RunArgs),
    RotationTracking(RunArgs),
    LandscapeMovie(RunArgs),
    ProgressiveFlattening(RunArgs),
    LrSweep(RunArgs),
    DriverInterventions(RunArgs),
}

fn launch(args: &RunArgs, recipe: Option<Recipe>) -> Result<bool, LabError> {
    let mut cfg = match (&args.config, recipe) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(r)) => ExperimentConfig::new(r),
        (None, None) => return Err(LabError::config("`run` needs --config")),
    };
    if let Some(r) = recipe {
        cfg.recipe = r;
    }
    let opts = RunOptions {
        workers: args.workers,
        output_dir: args.out.clone(),
    };
    let manifest = eos_lab::run(&cfg, &opts)?;
    for r in &manifest.runs {
        println!("{:<40} {:<10} {}", r.id, r.outcome.as_str(), r.detail);
    }
    Ok(!manifest.any_error())
}

fn dispatch(cli: Cli) -> Result<bool, LabError> {
    let recipe_run = |args: &RunArgs, r| launch(args, Some(r));
    match cli.command {
        Command::Run(args) => launch(&args, None),
        Command::FetchData { url, dir, config } => {
            let dir = match (dir, config) {
                (Some(d), _) => d,
                (None, Some(c)) => ExperimentConfig::load(&c)?.dataset.dir,
                (None, None) => DatasetConfig::default().dir,
            };
            let report = fetch::fetch(&url, &dir)?;
            println!(
                "{}: downloaded {:?}, kept {:?}{}",
                report.dir.display(),
                report.downloaded,
                report.skipped,
                if report.manifest_written { ", wrote manifest.txt" } else { "" }
            );
            Ok(true)
        }
        Command::ValidateConfig { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{}: ok (recipe {}, hash {})", config.display(), cfg.recipe, cfg.hash());
            Ok(true)
        }
        Command::Schema { recipe } => {
            println!("{}", ExperimentConfig::schema_doc(recipe.parse()?));
            Ok(true)
        }
        Command::DlnPhaseMap(a) => recipe_run(&a, Recipe::DlnPhaseMap),
        Command::RotationTracking(a) => recipe_run(&a, Recipe::RotationTracking),
        Command::LandscapeMovie(a) => recipe_run(&a, Recipe::LandscapeMovie),
        Command::ProgressiveFlattening(a) => recipe_run(&a, Recipe::ProgressiveFlattening),
        Command::LrSweep(a) => recipe_run(&a, Recipe::LrSweep),
        Command::DriverInterventions(a) => recipe_run(&a, Recipe::DriverInterventions),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
