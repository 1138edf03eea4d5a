use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stevm::artifact::FitArtifact;
use stevm::config::Config;
use stevm::data::{simulate_dataset, ObservationTable};
use stevm::evaluation::{summary_text, EvaluationReport};
use stevm::excursion;
use stevm::inference::FitResult;
use stevm::pipeline::{threshold_tag, write_comparison, write_criteria, Pipeline};
use stevm::{Error, Result};

/// Thread count for grid evaluation and Monte Carlo sampling.
const THREADS_VAR: &str = "STEVM_THREADS";

#[derive(Parser)]
#[command(name = "stevm", version, about = "Spatio-temporal extreme-value models for annual PM10 maxima")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic observation file from the `[simulate]` section.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generating values as TOML.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Fit a model and write `<run>/fit.bin` and `<run>/summary.csv`.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Default seed stored for later stochastic steps.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Predictive summaries at the fitted rows or at the rows of `--data`.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `<run>/predictions.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Model criteria: `<run>/criteria.csv` and `<run>/observations.csv`.
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        run: Vec<PathBuf>,
        /// Combined criteria of all runs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank fits per criterion.
    Compare {
        #[arg(long, required = true, num_args = 1..)]
        run: Vec<PathBuf>,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Excursion maps `<run>/excursion_<u>.csv` and `.geojson`.
    Excursion {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the seed stored in the artifact.
        #[arg(long)]
        seed: Option<u64>,
        /// Response-scale thresholds; defaults to the config's.
        #[arg(long = "threshold")]
        thresholds: Vec<f64>,
        #[arg(long)]
        year: Option<i32>,
    },
}

fn threads() -> usize {
    match std::env::var(THREADS_VAR) {
        Ok(v) => v.trim().parse().ok().filter(|&n| n > 0).unwrap_or_else(|| {
            log::warn!("ignoring {THREADS_VAR}={v}; using 1 thread");
            1
        }),
        Err(_) => 1,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

/// Writes via a temporary sibling so a failed run leaves no partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn load_run(run: &Path) -> Result<(FitArtifact, Pipeline)> {
    let a = FitArtifact::load(run.join("fit.bin"))?;
    let p = Pipeline::from_artifact(&a)?;
    Ok((a, p))
}

fn evaluate_run(run: &Path) -> Result<(Pipeline, FitResult, EvaluationReport)> {
    let (a, p) = load_run(run)?;
    let report = p.evaluate(&a.fit)?;
    Ok((p, a.fit, report))
}

fn simulate(config: Option<&Path>, seed: u64, out: &Path, truth: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(c) => Config::parse(&read(c)?)?,
        None => Config::default(),
    };
    let (table, gt) = simulate_dataset(&cfg.simulate, seed)?;
    write_atomic(out, &to_bytes(|b| table.write_to(b))?)?;
    if let Some(t) = truth {
        write_atomic(t, gt.to_toml()?.as_bytes())?;
    }
    log::info!("wrote {} station-years to {}", table.rows.len(), out.display());
    Ok(())
}

fn fit_cmd(config: &Path, data: &Path, run: &Path, seed: u64) -> Result<()> {
    let p = Pipeline::build(&read(config)?, &read(data)?)?;
    let fit = p.fit(threads())?;
    let artifact = p.artifact(&fit, seed)?;
    fs::create_dir_all(run)?;
    write_atomic(&run.join("fit.bin"), &artifact.to_bytes())?;
    write_atomic(&run.join("summary.csv"), &to_bytes(|b| p.write_summary(b, &fit))?)?;
    println!("{}: {} grid points, log marginal likelihood {:.4}", fit.label, fit.grid.len(), fit.log_marginal_mode);
    Ok(())
}

fn predict_cmd(run: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (a, p) = load_run(run)?;
    let block = p.report_block();
    let targets = match data {
        Some(d) => p.table_targets(&ObservationTable::load(d)?, block)?,
        None => {
            let mut t = p.row_targets(block, true);
            t.extend(p.row_targets(block, false));
            t
        }
    };
    let rows = p.predict(&a.fit, &targets)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run.join("predictions.csv"));
    write_atomic(&out, &to_bytes(|b| p.write_predictions(b, &targets, &rows))?)?;
    Ok(())
}

fn evaluate_cmd(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut reports = Vec::new();
    for run in runs {
        let (p, fit, report) = evaluate_run(run)?;
        write_atomic(&run.join("criteria.csv"), &to_bytes(|b| write_criteria(b, std::slice::from_ref(&report)))?)?;
        write_atomic(&run.join("observations.csv"), &to_bytes(|b| p.write_observations(b, &fit, &report))?)?;
        reports.push(report);
    }
    if let Some(o) = out {
        write_atomic(o, &to_bytes(|b| write_criteria(b, &reports))?)?;
    }
    print!("{}", summary_text(&reports));
    Ok(())
}

fn compare_cmd(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let reports = runs.iter().map(|r| evaluate_run(r).map(|x| x.2)).collect::<Result<Vec<_>>>()?;
    let table = to_bytes(|b| write_comparison(b, &reports))?;
    match out {
        Some(o) => write_atomic(o, &table)?,
        None => std::io::stdout().write_all(&table)?,
    }
    Ok(())
}

fn excursion_cmd(run: &Path, seed: Option<u64>, thresholds: &[f64], year: Option<i32>) -> Result<()> {
    let (a, p) = load_run(run)?;
    let thresholds = if thresholds.is_empty() { p.config.excursion.thresholds.clone() } else { thresholds.to_vec() };
    let targets = p.map_targets(year)?;
    let ids: Vec<String> = targets.iter().map(|t| t.id.clone()).collect();
    let plain: Vec<_> = targets.iter().map(|t| t.target.clone()).collect();
    let seed = seed.unwrap_or(a.seed);
    let probs = excursion::exceedance_map(&p.system, &a.fit, &thresholds, &plain)?;
    write_atomic(&run.join("exceedance.csv"), &to_bytes(|b| write_exceedance(b, &ids, &plain, &thresholds, &probs))?)?;
    for &u in &thresholds {
        let res = p.excursion(&a.fit, &targets, u, seed, threads())?;
        for w in &res.warnings {
            log::warn!("threshold {u}: {w}");
        }
        let tag = threshold_tag(u);
        write_atomic(
            &run.join(format!("excursion_{tag}.csv")),
            &to_bytes(|b| excursion::write_csv(b, &ids, &plain, &res))?,
        )?;
        write_atomic(&run.join(format!("excursion_{tag}.geojson")), excursion::geojson(&ids, &plain, &res).as_bytes())?;
    }
    Ok(())
}

/// Response-scale `Prob(Y > u)` per location, one column per threshold.
fn write_exceedance(
    out: &mut Vec<u8>,
    ids: &[String],
    targets: &[stevm::inference::PredictionTarget],
    thresholds: &[f64],
    probs: &[Vec<f64>],
) -> Result<()> {
    let mut head = String::from("location_id,lon,lat");
    for u in thresholds {
        head.push_str(&format!(",prob_above_{}", threshold_tag(*u)));
    }
    writeln!(out, "{head}")?;
    for (i, t) in targets.iter().enumerate() {
        write!(out, "{},{},{}", ids[i], t.location[0], t.location[1])?;
        for row in probs {
            write!(out, ",{:.8}", row[i])?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, seed, out, truth } => simulate(config.as_deref(), seed, &out, truth.as_deref()),
        Command::Fit { config, data, run, seed } => fit_cmd(&config, &data, &run, seed),
        Command::Predict { run, data, out } => predict_cmd(&run, data.as_deref(), out.as_deref()),
        Command::Evaluate { run, out } => evaluate_cmd(&run, out.as_deref()),
        Command::Compare { run, out } => compare_cmd(&run, out.as_deref()),
        Command::Excursion { run, seed, thresholds, year } => excursion_cmd(&run, seed, &thresholds, year),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
