//! Command-line runner for the slepbeam experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};
use slepbeam::config::ScenarioConfig;
use slepbeam::experiment::{self, Aggregate, ExperimentResult, TrialRow, Verb};
use slepbeam::Error;

#[derive(Parser)]
#[command(name = "slepbeam", version, about = "Wideband array beamforming experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario file of `key = value` lines; defaults apply without one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for CSV tables and the JSON sidecar.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    trials: Option<usize>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Subspace dimension against time-bandwidth product.
    Dims,
    /// Least squares, delay-and-sum and subarray beamformers.
    Conventional,
    /// Interference cancellation sweeps.
    Adaptive,
    /// Streaming reconstruction with packet merging.
    Streaming,
    /// Encoded measurements.
    Encode,
    /// Error budget, sampling and merge diagnostics.
    Diag,
}

impl From<Command> for Verb {
    fn from(c: Command) -> Verb {
        match c {
            Command::Dims => Verb::Dims,
            Command::Conventional => Verb::Conventional,
            Command::Adaptive => Verb::Adaptive,
            Command::Streaming => Verb::Streaming,
            Command::Encode => Verb::Encode,
            Command::Diag => Verb::Diag,
        }
    }
}

fn load(cli: &Cli) -> Result<ScenarioConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ScenarioConfig::from_file(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(trials) = cli.trials {
        cfg.trials = trials;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_csv<I, R>(path: &Path, header: &[String], rows: I) -> Result<(), Error>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn strings(h: &[&str]) -> Vec<String> {
    h.iter().map(|s| s.to_string()).collect()
}

fn write_outputs(dir: &Path, cfg: &ScenarioConfig, res: &ExperimentResult) -> Result<Vec<String>, Error> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    if !res.trials.is_empty() {
        write_csv(&dir.join("trials.csv"), &strings(&TrialRow::HEADER), res.trials.iter().map(TrialRow::record))?;
        files.push("trials.csv".to_string());
    }
    if !res.aggregates.is_empty() {
        write_csv(&dir.join("aggregates.csv"), &strings(&Aggregate::HEADER), res.aggregates.iter().map(Aggregate::record))?;
        files.push("aggregates.csv".to_string());
    }
    for t in &res.tables {
        let name = format!("{}.csv", t.name);
        write_csv(&dir.join(&name), &t.header, t.rows.iter().map(|r| r.iter().map(|c| c.to_string()).collect::<Vec<_>>()))?;
        files.push(name);
    }

    let canonical = cfg.canonical();
    let hash: String = Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    let aggregates: Vec<_> = res
        .aggregates
        .iter()
        .map(|a| {
            json!({
                "method": a.method,
                "setting": a.setting,
                "nominal_snr_db": a.nominal_snr_db,
                "sir_db": a.sir_db,
                "trials": a.trials,
                "mean_snr_db": a.mean_snr_db,
                "std_snr_db": a.std_snr_db,
                "mean_gain_db": a.mean_gain_db,
                "std_gain_db": a.std_gain_db,
                "ideal_gain_db": a.ideal_gain_db,
            })
        })
        .collect();
    let sidecar = json!({
        "verb": res.verb.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "git_revision": option_env!("SLEPBEAM_GIT_REV"),
        "seed": cfg.seed,
        "trials": cfg.trials,
        "config_sha256": hash,
        "config": canonical,
        "files": files,
        "aggregates": aggregates,
    });
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Io(e.into()))?;
    fs::write(dir.join("run.json"), text + "\n")?;
    files.push("run.json".to_string());
    Ok(files)
}

fn execute(cli: &Cli) -> Result<Vec<String>, Error> {
    let cfg = load(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let res = pool.install(|| experiment::run(cli.command.into(), &cfg))?;
    write_outputs(&cli.out, &cfg, &res)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", cli.out.join(f).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("slepbeam: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
