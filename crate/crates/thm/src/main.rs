use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thm::experiment::{all_acceptable, build_mesh, reports_orders, run_experiment};
use thm::report::{iteration_matrix, to_csv};
use thm::{ExperimentConfig, RunStatus};

#[derive(Parser)]
#[command(name = "thm", about = "Polytopal DG solver for the nonlinear thermo-hydro-mechanical problem")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the experiment described by a configuration file and writes its CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV (defaults to the `output` key of the configuration, else stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also execute heavy runs.
        #[arg(long)]
        heavy: bool,
    },
    /// Mesh utilities.
    Mesh {
        #[command(subcommand)]
        command: MeshCommand,
    },
}

#[derive(Subcommand)]
enum MeshCommand {
    /// Writes a Lloyd-relaxed Voronoi mesh of the unit square.
    Generate {
        #[arg(long)]
        cells: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        lloyd: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(config: PathBuf, out: Option<PathBuf>, heavy: bool) -> Result<bool, Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::load(&config)?;
    let results = run_experiment(&cfg, heavy, &|r| {
        let detail = match &r.status {
            RunStatus::Error(msg) => format!(" ({msg})"),
            _ => String::new(),
        };
        eprintln!(
            "{} {} ell={} N={}: {} after {} iterations, {:.1} s{}",
            r.label,
            r.spec.variant.name(),
            r.spec.ell,
            r.spec.cells,
            r.status.name(),
            r.iterations,
            r.seconds,
            detail
        );
    })?;
    let csv = to_csv(&results, reports_orders(cfg.kind))?;
    match out.or_else(|| cfg.output.clone()) {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&path, csv)?;
        }
        None => print!("{csv}"),
    }
    if cfg.kind.is_robustness() {
        eprint!("{}", iteration_matrix(&results));
    }
    Ok(all_acceptable(&cfg, &results)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out, heavy } => run(config, out, heavy),
        Command::Mesh { command: MeshCommand::Generate { cells, seed, lloyd, out } } => {
            build_mesh(cells, seed, lloyd).and_then(|m| m.save(&out)).map(|_| true).map_err(Into::into)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
