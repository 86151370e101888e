use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ichscnet_core::harness::train::write_report;
use ichscnet_core::harness::{self, render_run_dir, render_table, table_row, RunConfig};
use ichscnet_core::synth_data::{generate_dataset_with, GeneratorConfig};
use ichscnet_core::Error;

#[derive(Parser)]
#[command(name = "ichscnet", version, about = "Joint hemorrhage segmentation and prognosis classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Image side length in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Cross-validated training run.
    Train(ConfigArgs),
    /// Train every mode and write the comparison table.
    Ablate(ConfigArgs),
    /// Score a saved fold model on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Only the checkpoint's validation cases.
        #[arg(long)]
        val_only: bool,
        /// Directory for report.json and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a run or ablation directory as a text table.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value, applied in order after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        Error::Numeric(_) => 4,
        Error::Data { .. } | Error::Io { .. } | Error::Json { .. } | Error::Checkpoint(_) | Error::Shape(_) => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { n, seed, out, size } => {
            let ds = generate_dataset_with(&GeneratorConfig::square(size), n, seed, &out)?;
            let poor = ds.labels().iter().filter(|&&l| l == 1).count();
            println!("wrote {} cases ({poor} poor) to {}", ds.len(), out.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let report = harness::train(&cfg)?;
            print!("{}", render_table(&[table_row(&report)]));
            println!("run directory: {}", cfg.run_dir.display());
        }
        Command::Ablate(args) => {
            let cfg = args.resolve()?;
            let table = harness::ablate(&cfg)?;
            print!("{}", render_table(&table.rows));
        }
        Command::Eval {
            checkpoint,
            data,
            val_only,
            out,
        } => {
            let report = harness::evaluate(&checkpoint, &data, val_only)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                write_report(&dir, &report)?;
            }
            print!("{}", render_table(&[table_row(&report)]));
        }
        Command::Report { run_dir } => print!("{}", render_run_dir(&run_dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
