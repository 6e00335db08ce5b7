use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sysid_bench::bench::{self, BenchConfig, Family, Profile, RunOptions, SystemData, TrainedModel, Trial};
use sysid_bench::data::{load_csv_auto, write_csv};
use sysid_bench::systems::{self, BUILTIN_SYSTEMS};

#[derive(Parser)]
#[command(name = "sysid-bench", version, about = "System identification benchmark: neural ODEs, neural state-space models, subspace methods")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a built-in system and write its series as CSV.
    Generate {
        #[arg(long)]
        system: String,
        /// Number of samples (default: the system's own).
        #[arg(long)]
        n: Option<usize>,
        /// Sampling time in seconds (default: the system's own).
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a CSV series (split into thirds) and save a checkpoint.
    Train {
        #[arg(long)]
        family: Family,
        #[arg(long)]
        data: PathBuf,
        /// Benchmark TOML; the first grid point of the family is trained.
        /// An optional [train] table sets `system`, `seed` and `grid_index`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        profile: Profile,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the thirds of a CSV series.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the grid sweep, the timing pass and the report.
    Benchmark {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        profile: Profile,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        resume: bool,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_trials: Option<usize>,
        #[arg(long)]
        skip_timing: bool,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Rebuild the report from a results directory.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the built-in systems and the grid sizes of both profiles.
    Describe {
        /// Show one system in detail.
        #[arg(long)]
        system: Option<String>,
    },
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    system: Option<String>,
    seed: Option<u64>,
    grid_index: Option<usize>,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Generate { system, n, delta, seed, out } => {
            let spec = systems::builtin(&system)?;
            let tr = systems::generate(&spec, n.unwrap_or(spec.n_samples), delta.unwrap_or(spec.delta), &spec.input_policy, seed)?;
            write_csv(&out, &tr)?;
            eprintln!("wrote {} samples of {system} to {}", tr.len(), out.display());
        }
        Cmd::Train { family, data, config, profile, out } => {
            let mut table: toml::Table = match &config {
                Some(p) => std::fs::read_to_string(p).with_context(|| p.display().to_string())?.parse()?,
                None => toml::Table::new(),
            };
            let section: TrainSection = match table.remove("train") {
                Some(v) => v.try_into()?,
                None => TrainSection::default(),
            };
            let cfg = BenchConfig::from_toml(&toml::to_string(&table)?, profile)?;
            let tr = load_csv_auto(&data)?;
            let system = section.system.unwrap_or_else(|| data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            let grid = cfg.grid.trials(family);
            let index = section.grid_index.unwrap_or(0);
            let Some(params) = grid.get(index).cloned() else { bail!("grid index {index} out of range ({} points)", grid.len()) };
            let split = SystemData::from_trajectory(&system, &tr)?;
            let trial = Trial { system, params, seed: section.seed.unwrap_or(cfg.seeds[0]) };
            eprintln!("training {}", trial.key());
            let start = std::time::Instant::now();
            let model = bench::train_trial_model(&split, &trial, &cfg)?;
            let (train, dev, test) = bench::evaluate_model(&model, &split);
            model.save(&out)?;
            println!("trained in {:.1}s  train {train:.6e}  dev {dev:.6e}  test {test:.6e}", start.elapsed().as_secs_f64());
        }
        Cmd::Evaluate { ckpt, data } => {
            let model = TrainedModel::load(&ckpt)?;
            let split = SystemData::from_trajectory("data", &load_csv_auto(&data)?)?;
            let (train, dev, test) = bench::evaluate_model(&model, &split);
            println!("family {}", model.family());
            println!("train_mse {train:.6e}\ndev_mse {dev:.6e}\ntest_mse {test:.6e}");
        }
        Cmd::Benchmark { config, profile, jobs, resume, out, max_trials, skip_timing, quiet } => {
            let mut cfg = match &config {
                Some(p) => BenchConfig::load(p, profile)?,
                None => BenchConfig::profile(profile),
            };
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let outcome = bench::run_benchmark(&cfg, &RunOptions { jobs, resume, max_trials, skip_timing, verbose: !quiet })?;
            eprintln!("{} trials run, {} skipped", outcome.executed.len(), outcome.skipped);
            match outcome.report {
                Some(_) => println!("{}", std::fs::read_to_string(cfg.output_dir.join(bench::run::REPORT_DIR).join("summary.md"))?),
                None => eprintln!("stopped early; rerun with --resume to finish"),
            }
        }
        Cmd::Report { results, out } => {
            bench::emit_report(&results, &out)?;
            println!("{}", std::fs::read_to_string(out.join("summary.md"))?);
        }
        Cmd::Describe { system } => match system {
            Some(name) => print!("{}", systems::builtin(&name)?.describe()),
            None => {
                println!("systems:");
                for name in BUILTIN_SYSTEMS {
                    let s = systems::builtin(name)?;
                    println!("  {name:<18} n_u {}  n_y {}  delta {}  samples {}", s.n_u, s.n_y, s.delta, s.n_samples);
                }
                for profile in [Profile::Desk, Profile::Paper] {
                    let cfg = BenchConfig::profile(profile);
                    let counts: Vec<String> = Family::ALL.iter().map(|f| format!("{f} {}", cfg.grid.count(*f))).collect();
                    println!("{profile:?} grid points per system: {}  ({} trials)", counts.join(", "), cfg.trials().len());
                }
            }
        },
    }
    Ok(())
}
