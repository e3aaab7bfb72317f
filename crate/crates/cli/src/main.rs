//! `patchfed` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use patchfed::commands;
use patchfed::config::{load_corpus_config, RunConfig};
use patchfed::grid::{self, ExperimentGrid};
use patchfed::{CliError, Result};
use patchfed_core::corpus::CorpusConfig;

#[derive(Parser)]
#[command(
    name = "patchfed",
    version,
    about = "Federated answer selection with private patches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and write it in the corpus layout.
    Generate {
        /// Corpus config (TOML); the built-in desk profile when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Question-count scale of the desk profile.
        #[arg(long, default_value_t = 0.2, conflicts_with = "config")]
        scale: f64,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory the corpus is written to.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one federated experiment.
    Run {
        /// Run config (TOML).
        config: PathBuf,
        /// Run directory for config, metrics, report and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every row of an experiment grid and compare them.
    Grid {
        /// Grid file (TOML).
        grid: PathBuf,
        /// Directory for per-row run directories and comparison tables.
        #[arg(long)]
        out: PathBuf,
        /// Overrides every row's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Only run rows whose name contains one of these substrings.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        /// Rows run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate final checkpoints on a corpus's test splits.
    Eval {
        /// Directory holding `<participant>.ckpt` files (a run's
        /// `checkpoints/final`), or a run directory.
        checkpoints: PathBuf,
        /// Corpus directory whose test splits are scored.
        #[arg(long)]
        corpus: PathBuf,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            scale,
            seed,
            out,
        } => {
            let mut c = match config {
                Some(path) => load_corpus_config(&path)?,
                None => CorpusConfig::desk(scale, seed.unwrap_or(1)),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            let corpus = commands::generate(&c, &out)?;
            for p in &corpus.participants {
                let s = &p.splits;
                println!(
                    "{:<12} train {:>6}  dev {:>6}  test {:>6} rows",
                    p.name,
                    s.train.len(),
                    s.dev.len(),
                    s.test.len()
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Run { config, out, seed } => {
            let mut c = RunConfig::load(&config)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            c.validate(None)?;
            let corpus = commands::load_corpus(&c.corpus)?;
            let label = config
                .file_stem()
                .map_or("run".to_string(), |s| s.to_string_lossy().into_owned());
            let outcome = commands::run(&c, &corpus, &out, &label)?;
            print!("{}", outcome.summary);
        }
        Command::Grid {
            grid: path,
            out,
            seed,
            rows,
            jobs,
        } => {
            let mut clients = |p: &std::path::Path| -> Result<usize> {
                Ok(commands::load_corpus(p)?.participants.len())
            };
            let mut g = ExperimentGrid::load(&path, &mut clients)?;
            g.filter(&rows);
            if let Some(s) = seed {
                for r in &mut g.rows {
                    r.config.seed = s;
                }
            }
            let results = grid::run_grid(&g, &out, jobs.max(1))?;
            print!("{}", grid::comparison_table(&results));
            grid::grid_status(&results)?;
        }
        Command::Eval {
            checkpoints,
            corpus,
            out,
        } => {
            let final_dir = commands::final_checkpoint_dir(&checkpoints);
            let dir = if final_dir.is_dir() {
                final_dir
            } else {
                checkpoints
            };
            let corpus = commands::load_corpus(&corpus)?;
            let outcome = commands::eval(&dir, &corpus)?;
            println!(
                "patch parameters loaded per participant: {}",
                outcome.patch_parameters
            );
            print!("{}", outcome.report.table("eval"));
            if let Some(path) = out {
                std::fs::write(&path, outcome.report.to_json())
                    .map_err(|e| patchfed_core::Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not failures; usage mistakes are
            // operator errors.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(patchfed::error::EXIT_USER)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            report_sources(&e);
            ExitCode::from(e.exit_code())
        }
    }
}

fn report_sources(e: &CliError) {
    let mut source = std::error::Error::source(e);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
}
