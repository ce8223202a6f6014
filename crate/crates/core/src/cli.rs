//! Command-line front end. Exit status: 0 success, 1 usage error, 2 data error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::harness::{
    compare, run_experiment, theta_sweep, write_compare_table, write_sweep_table, ExperimentConfig, RunOptions,
    DEFAULT_THETA_GRID,
};
use crate::ingest::{load_predictions, parse_dota, parse_dota_file, read_cycle_reports, read_features, read_query_results};
use crate::synthgen::{gen_pool, GenConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "muscdb", version, about = "Object-level active learning for oriented object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic pool (DOTA labels, predictions, features) on disk.
    Generate {
        /// Generator config JSON; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only these seeds (repeatable).
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed cycles.
        #[arg(long)]
        stop_after: Option<u32>,
    },
    /// Sweep the image-confidence threshold.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        thetas: Option<Vec<f64>>,
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate runs side by side; the first directory is the reference.
    Compare {
        #[arg(required = true, num_args = 1..)]
        dirs: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that an input file parses.
    Validate {
        #[arg(long, value_enum)]
        kind: Kind,
        file: PathBuf,
        /// Class names, one per line, for DOTA files.
        #[arg(long)]
        classes: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    Dota,
    Predictions,
    Results,
    Features,
    Reports,
    Config,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_DATA
        }
    }
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_config(path: &Path, seeds: &[u64]) -> Result<ExperimentConfig, String> {
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&read(path)?).map_err(|e| format!("{}:{}: {e}", path.display(), e.line()))?;
    if !seeds.is_empty() {
        cfg.seeds = seeds.to_vec();
    }
    cfg.validate().map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<(), String> {
    match cmd {
        Command::Generate { config, seed, out } => {
            let mut cfg: GenConfig = match &config {
                Some(p) => serde_json::from_str(&read(p)?).map_err(|e| format!("{}:{}: {e}", p.display(), e.line()))?,
                None => GenConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let pool = gen_pool(&cfg).map_err(|e| e.to_string())?;
            pool.write_to(&out, &cfg.class_names()).map_err(|e| e.to_string())?;
            println!("{}", pool.digest());
            Ok(())
        }
        Command::Run { config, seed, out, resume, stop_after } => {
            let cfg = load_config(&config, &seed)?;
            let runs = run_experiment(&cfg, &RunOptions { out, resume, stop_after }).map_err(|e| e.to_string())?;
            for r in &runs {
                for (report, t) in r.reports.iter().rev().zip(r.wall_times.iter().rev()) {
                    eprintln!("seed {} cycle {}: {:.3}s", r.seed, report.cycle, t.as_secs_f64());
                }
                if let Some(last) = r.reports.last() {
                    let recall = last.macro_recall.map_or("NA".into(), |v| format!("{v:.4}"));
                    println!("seed {} cycles {} macro_recall {}", r.seed, last.cycle, recall);
                }
            }
            Ok(())
        }
        Command::Sweep { config, thetas, seed, out } => {
            let cfg = load_config(&config, &seed)?;
            let grid = thetas.unwrap_or_else(|| DEFAULT_THETA_GRID.to_vec());
            let (rows, _) =
                theta_sweep(&cfg, &grid, &RunOptions { out, ..Default::default() }).map_err(|e| e.to_string())?;
            print!("{}", write_sweep_table(&rows));
            Ok(())
        }
        Command::Compare { dirs, out } => {
            let rows = compare(&dirs).map_err(|e| e.to_string())?;
            let table = write_compare_table(&rows);
            match out {
                Some(p) => std::fs::write(&p, table).map_err(|e| format!("{}: {e}", p.display())),
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
        Command::Validate { kind, file, classes } => {
            let text = read(&file)?;
            let at = |e: crate::ingest::IngestError| match e.line() {
                Some(line) => format!("{}:{line}: {e}", file.display()),
                None => format!("{}: {e}", file.display()),
            };
            let count = match kind {
                Kind::Dota => {
                    let class_list: Vec<String> = match &classes {
                        Some(p) => read(p)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
                        None => {
                            let mut names: Vec<String> =
                                parse_dota(&text).map_err(at)?.objects.into_iter().map(|o| o.category).collect();
                            names.sort();
                            names.dedup();
                            names
                        }
                    };
                    if class_list.is_empty() {
                        0
                    } else {
                        parse_dota_file(&text, &class_list).map_err(at)?.len()
                    }
                }
                Kind::Predictions => load_predictions(&text).map_err(at)?.len(),
                Kind::Results => read_query_results(&text).map_err(at)?.len(),
                Kind::Features => read_features(&text).map_err(at)?.len(),
                Kind::Reports => read_cycle_reports(&text).map_err(at)?.len(),
                Kind::Config => {
                    load_config(&file, &[])?;
                    1
                }
            };
            println!("ok: {count} records");
            Ok(())
        }
    }
}
