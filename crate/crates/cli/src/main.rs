use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmmloc::harness::{ablate, pipeline, report, Ablation, ExperimentConfig, ResultsTable, RunDir};
use cmmloc::Result;

/// Coarse-to-fine text-to-point-cloud localization on synthetic cities.
#[derive(Debug, Parser)]
#[command(name = "cmmloc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Root seed of every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Config file; defaults to `<out>/config.txt` when present.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as dotted `key=value` pairs.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train, validation and test splits.
    Generate(Common),
    /// Train the coarse retrieval model.
    TrainCoarse(Common),
    /// Pre-align the fine-stage object encoder.
    Prealign(Common),
    /// Train the fine regression.
    TrainFine(Common),
    /// Evaluate retrieval and localization on the test split.
    Eval(Common),
    /// Every stage in order.
    Run(Common),
    /// Paired ablation over several seeds.
    Ablate {
        /// window-family, weight-assignment, noise-sweep, fine-modules or layer-count.
        name: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Render result CSVs into `<out>/report.md`.
    Report {
        /// Result CSV files; defaults to `<out>/results.csv`.
        #[arg(long = "table")]
        tables: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let stored = c.out.join("config.txt");
    let base = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if stored.exists() => ExperimentConfig::load(&stored)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_override_args(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn print_table(t: &ResultsTable) {
    print!("{}", cmmloc::harness::render_markdown(t));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = load_config(&c)?;
            let splits = pipeline::generate(&cfg, &RunDir::new(&c.out))?;
            for s in &splits {
                println!("{}: {} submaps, {} queries", s.name, s.submaps.len(), s.queries.len());
            }
        }
        Command::TrainCoarse(c) => {
            let cfg = load_config(&c)?;
            pipeline::train_coarse_stage(&cfg, &RunDir::new(&c.out))?;
        }
        Command::Prealign(c) => {
            let cfg = load_config(&c)?;
            pipeline::prealign_stage(&cfg, &RunDir::new(&c.out))?;
        }
        Command::TrainFine(c) => {
            let cfg = load_config(&c)?;
            pipeline::train_fine_stage(&cfg, &RunDir::new(&c.out))?;
        }
        Command::Eval(c) => {
            let cfg = load_config(&c)?;
            print_table(&pipeline::eval_stage(&cfg, &RunDir::new(&c.out))?);
        }
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            print_table(&pipeline::run_end_to_end(&cfg, &c.out)?);
        }
        Command::Ablate { name, seeds, common } => {
            let ablation: Ablation = name.parse()?;
            let cfg = load_config(&common)?;
            let table = ablate(ablation, &cfg, &seeds)?;
            table.save_csv(&common.out.join(format!("ablation-{}.csv", ablation.name())))?;
            println!("{}", cmmloc::harness::render_comparison(&table));
        }
        Command::Report { tables, out } => {
            let paths = if tables.is_empty() { vec![out.join("results.csv")] } else { tables };
            let loaded = paths
                .iter()
                .map(|p| ResultsTable::load_csv(Path::new(p)))
                .collect::<Result<Vec<_>>>()?;
            report(&loaded, &out)?;
            println!("wrote {}", out.join("report.md").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!(": {s}"));
                }
                src = s.source();
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

