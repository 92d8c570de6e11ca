use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use greenofdma::experiment::{self, ExperimentConfig, ExperimentOutput, Sweep};
use greenofdma::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Emit {
    Csv,
    Json,
}

/// Monte Carlo runs of the offline, online and DP allocators.
#[derive(Debug, Parser)]
#[command(name = "greenofdma", version)]
struct Args {
    /// TOML configuration; missing keys take the desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated subset of offline, online-subopt, online-dp.
    #[arg(long)]
    solvers: Option<String>,
    /// Parameter sweep `key=lo:hi:n` or `key=a,b,c`; repeat for a grid.
    /// Keys: harvest_rate (J/s), p_max_dbm, p_n_dbm, users.
    #[arg(long)]
    sweep: Vec<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    emit: Emit,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_SCALE_GUARD: u8 = 3;

fn load(args: &Args) -> greenofdma::Result<(ExperimentConfig, Vec<Sweep>)> {
    let mut exp = match &args.config {
        Some(p) => ExperimentConfig::from_file(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &args.solvers {
        exp.solvers = experiment::parse_solvers(s)?;
    }
    if let Some(t) = args.trials {
        exp.trials = t;
    }
    if let Some(s) = args.seed {
        exp.seed = s;
        exp.system.seed = s;
    }
    exp.validate()?;
    let sweeps = args.sweep.iter().map(|s| s.parse()).collect::<greenofdma::Result<Vec<Sweep>>>()?;
    Ok((exp, sweeps))
}

fn write_outputs(out: &ExperimentOutput, dir: &std::path::Path, emit: Emit) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let files = match emit {
        Emit::Csv => vec![
            ("trials.csv", experiment::trials_csv(&out.trials)?),
            ("aggregates.csv", experiment::aggregates_csv(&out.aggregates)?),
        ],
        Emit::Json => vec![
            ("trials.json", serde_json::to_string_pretty(&out.records)?),
            ("aggregates.json", serde_json::to_string_pretty(&out.aggregates)?),
        ],
    };
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

fn run(args: &Args) -> Result<(), (u8, String)> {
    let classify = |e: Error| match e {
        Error::Config(_) | Error::InvalidInput(_) => (EXIT_CONFIG, e.to_string()),
        Error::ScaleGuard(_) => (EXIT_SCALE_GUARD, format!("refusing to run: {e}")),
        other => (1, other.to_string()),
    };
    let (exp, sweeps) = load(args).map_err(classify)?;
    let out = experiment::run_experiment(&exp, &sweeps, args.emit == Emit::Json).map_err(classify)?;
    for a in &out.aggregates {
        println!(
            "{:<13} rate={} J/s P_max={:.1} dBm P_N={:.1} dBm K={}  pass {:.3}  EE {:.6e} ± {:.2e} bit/J  capacity {:.6e} ± {:.2e} bit",
            a.solver.name(),
            a.harvest_rate_w,
            a.p_max_dbm,
            a.p_n_dbm,
            a.n_users,
            a.pass_rate,
            a.mean_ee,
            a.se_ee,
            a.mean_capacity_bits,
            a.se_capacity_bits,
        );
    }
    let written = write_outputs(&out, &args.out_dir, args.emit).map_err(|e| (1, format!("{e:#}")))?;
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
