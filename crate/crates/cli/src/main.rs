use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use microsearch::harness::{
    dense_report, evaluate_config, export, front_table, resume, start, RunConfig, RunDir,
    RunSummary,
};
use microsearch::memmodel::MemoryReport;
use microsearch::mobo::{kb, ObjectiveSet};
use microsearch::searchspace::{Configuration, SearchSpaceDescriptor, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "microsearch",
    version,
    about = "Memory-constrained CNN architecture search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Wm {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objectives {
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
}

#[derive(clap::Args)]
struct RunSource {
    /// Run configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in run configuration: mnist-8x8, mnist-14x14, mnist-binary-8x8, texture.
    #[arg(long)]
    preset: Option<String>,
}

impl RunSource {
    fn load(&self) -> Result<RunConfig, String> {
        match (&self.config, &self.preset) {
            (Some(p), _) => RunConfig::load(p),
            (None, Some(name)) => {
                RunConfig::preset(name).ok_or_else(|| format!("unknown preset {name:?}"))
            }
            (None, None) => Err("pass --config <file> or --preset <name>".into()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Start (or continue) a search; the ledger is written as it goes.
    Search {
        #[command(flatten)]
        source: RunSource,
        /// Output directory; overrides the config and the environment.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_enum)]
        wm_model: Option<Wm>,
        #[arg(long, value_enum)]
        objectives: Option<Objectives>,
        /// Total evaluations (split 60/20/20 over the stages).
        #[arg(long)]
        budget: Option<usize>,
        /// Stop after this many new evaluations.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Continue an interrupted search in its run directory.
    Resume {
        dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Print the current Pareto set.
    Front { dir: PathBuf },
    /// Write pareto.csv, pareto.svg and scatter.csv into the run directory.
    Export { dir: PathBuf },
    /// Train, prune and measure one configuration file.
    Evaluate {
        config: PathBuf,
        #[command(flatten)]
        source: RunSource,
    },
    /// Memory report of a configuration file, without training.
    Memreport {
        config: PathBuf,
        /// Input shape CxHxW.
        #[arg(long, default_value = "1x8x8")]
        input: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long)]
        json: bool,
    },
    /// Print a built-in run configuration as JSON.
    Preset { name: String },
    /// Print a random valid configuration as JSON.
    Sample {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw from this preset's capped space instead of the standard one.
        #[arg(long)]
        preset: Option<String>,
    },
}

fn read_configuration(path: &Path) -> Result<Configuration, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("bad shape {s:?}; expected CxHxW"))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        _ => Err(format!("bad shape {s:?}; expected CxHxW")),
    }
}

fn report_summary(summary: &RunSummary, n: usize) {
    let ok = summary
        .records
        .iter()
        .filter(|r| r.metrics().is_some())
        .count();
    println!(
        "{} evaluations ({} failed), hypervolume {:.6}",
        summary.records.len(),
        summary.records.len() - ok,
        summary.hypervolume.last().copied().unwrap_or(0.0)
    );
    print!("{}", front_table(&summary.records, n));
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Search {
            source,
            out,
            seed,
            workers,
            wm_model,
            objectives,
            budget,
            stop_after,
        } => {
            let mut cfg = source.load()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if let Some(m) = wm_model {
                cfg.wm_model = match m {
                    Wm::One => 1,
                    Wm::Two => 2,
                };
            }
            if let Some(o) = objectives {
                cfg.objectives = match o {
                    Objectives::Two => ObjectiveSet::Two,
                    Objectives::Three => ObjectiveSet::Three,
                };
            }
            if let Some(b) = budget {
                cfg.budget = b;
                cfg.stages = None;
            }
            let dir = RunDir::new(out.unwrap_or_else(|| cfg.output_dir()));
            let summary = start(&cfg, &dir, stop_after).map_err(|e| e.to_string())?;
            println!("run directory {}", dir.root.display());
            report_summary(&summary, cfg.objectives.len());
        }
        Command::Resume {
            dir,
            workers,
            stop_after,
        } => {
            let dir = RunDir::new(dir);
            let summary = resume(&dir, workers, stop_after).map_err(|e| e.to_string())?;
            let n = dir
                .load_config()
                .map_err(|e| e.to_string())?
                .objectives
                .len();
            report_summary(&summary, n);
        }
        Command::Front { dir } => {
            let dir = RunDir::new(dir);
            let n = dir
                .load_config()
                .map_err(|e| e.to_string())?
                .objectives
                .len();
            let records = dir.records().map_err(|e| e.to_string())?;
            print!("{}", front_table(&records, n));
        }
        Command::Export { dir } => {
            let dir = RunDir::new(dir);
            let n = dir
                .load_config()
                .map_err(|e| e.to_string())?
                .objectives
                .len();
            export(&dir, n).map_err(|e| e.to_string())?;
            for p in [dir.pareto_csv(), dir.pareto_svg(), dir.scatter_csv()] {
                println!("wrote {}", p.display());
            }
        }
        Command::Evaluate { config, source } => {
            let cfg = source.load()?;
            let space = cfg.space()?;
            let c = read_configuration(&config)?;
            let ev = evaluate_config(&cfg, &space, &c).map_err(|e| e.to_string())?;
            let m = &ev.metrics;
            println!(
                "val acc {:.2}%  test acc {:.2}%  MS {:.2} KB  WM {:.2} KB  edges {}  nonzero {}  epochs {}",
                100.0 * m.val_accuracy,
                100.0 * m.test_accuracy,
                kb(m.objectives.model_size_bits),
                kb(m.objectives.working_memory_bits),
                m.edges,
                m.nonzero_weights,
                m.epochs
            );
            let (g, w) = &ev.deployed;
            print!("{}", MemoryReport::compute(g, w, 8).to_table());
        }
        Command::Memreport {
            config,
            input,
            classes,
            json,
        } => {
            let c = read_configuration(&config)?;
            let task = Task {
                input: parse_shape(&input)?,
                classes,
            };
            let space = SearchSpaceDescriptor::standard();
            let report = dense_report(&space, &c, task, 8).map_err(|e| e.to_string())?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&report).expect("report serializes")
                );
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Preset { name } => {
            let cfg = RunConfig::preset(&name).ok_or_else(|| format!("unknown preset {name:?}"))?;
            println!("{}", cfg.to_json());
        }
        Command::Sample { seed, preset } => {
            let space = match preset {
                Some(name) => RunConfig::preset(&name)
                    .ok_or_else(|| format!("unknown preset {name:?}"))?
                    .space()?,
                None => SearchSpaceDescriptor::standard(),
            };
            let c = space.sample_random(&mut ChaCha8Rng::seed_from_u64(seed));
            println!(
                "{}",
                serde_json::to_string_pretty(&c).expect("configuration serializes")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
