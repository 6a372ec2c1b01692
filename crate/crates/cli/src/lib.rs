//! Command-line front end. Every subcommand writes its results under `--out`
//! and returns the process exit status.

pub mod dist;
pub mod verify;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use ghostnoise_core::analytics::{HistogramBin, TraceRecord};
use ghostnoise_core::rng::RNG_ALGORITHM;
use ghostnoise_train::sweep::{run_cells, SweepResult};
use ghostnoise_train::{ExperimentConfig, Splits};
use serde::Serialize;

use crate::dist::DistConfig;
use crate::verify::{run_verify, InvariantResult, VerifyOptions, DEFAULT_TRIALS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "ghostnoise", version, about = "Ghost batch normalization noise: verification, distribution probes, training and sweeps")]
pub struct Cli {
    /// JSON config; unknown keys are rejected
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Root seed, overriding the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the algebraic invariants
    Verify {
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Measure ghost noise and compare with the analytical laws
    Dist,
    /// Train one model
    Train,
    /// Train over the config's sweep axis and seeds
    Sweep {
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Train and record ghost noise traces per layer and epoch
    NoiseStats,
}

/// Runs the command, printing a report to stdout. Returns the exit status.
pub fn run(cli: &Cli) -> anyhow::Result<i32> {
    fs::create_dir_all(&cli.out).with_context(|| format!("cannot create output directory {}", cli.out.display()))?;
    match &cli.command {
        Command::Verify { trials, inject_fault } => cmd_verify(cli, *trials, *inject_fault),
        Command::Dist => cmd_dist(cli),
        Command::Train => cmd_train(cli),
        Command::Sweep { parallel } => cmd_sweep(cli, *parallel),
        Command::NoiseStats => cmd_noise_stats(cli),
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn to_csv<T: Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn seed_line(seed: u64) -> String {
    format!("seed {seed} ({RNG_ALGORITHM})")
}

fn cmd_verify(cli: &Cli, trials: usize, inject_fault: bool) -> anyhow::Result<i32> {
    let seed = cli.seed.unwrap_or(0);
    let results = run_verify(&VerifyOptions { trials, seed, inject_fault })?;
    let mut report = format!("{}\n", seed_line(seed));
    let _ = writeln!(report, "{:<36} {:>7} {:>14} {:>10}  result", "invariant", "trials", "worst", "threshold");
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(report, "{:<36} {:>7} {:>14.6e} {:>10.1e}  {verdict}", r.invariant, r.trials, r.worst_residual, r.threshold);
    }
    print!("{report}");
    match cli.format {
        Format::Csv => write(&cli.out.join("verify.csv"), &to_csv(&results)?)?,
        Format::Json => write(&cli.out.join("verify.json"), &to_json(&VerifyDoc { seed, rng: RNG_ALGORITHM, invariants: &results })?)?,
    }
    write(&cli.out.join("verify.txt"), &report)?;
    Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
}

#[derive(Serialize)]
struct VerifyDoc<'a> {
    seed: u64,
    rng: &'a str,
    invariants: &'a [InvariantResult],
}

fn read_config<T: serde::de::DeserializeOwned + Default>(cli: &Cli) -> anyhow::Result<T> {
    match &cli.config {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

#[derive(Serialize)]
struct HistRow {
    distribution: &'static str,
    lo: f64,
    hi: f64,
    count: u64,
}

fn hist_rows_of(distribution: &'static str, bins: &[HistogramBin]) -> Vec<HistRow> {
    bins.iter().map(|b| HistRow { distribution, lo: b.lo, hi: b.hi, count: b.count }).collect()
}

fn cmd_dist(cli: &Cli) -> anyhow::Result<i32> {
    let cfg: DistConfig = read_config(cli)?;
    let seed = cli.seed.unwrap_or(0);
    let report = dist::run_dist(&cfg, seed)?;
    let mut text = format!("{}\nmodel {:?}, {} draws\n", seed_line(seed), cfg.model, report.draws);
    let _ = writeln!(text, "{:<18} {:>12} {:>12} {:>10} {:>8} {:>10}  result", "quantity", "analytical", "empirical", "rel_err", "ks_d", "threshold");
    for r in &report.rows {
        let verdict = if r.threshold.is_nan() { "info" } else if r.passed { "PASS" } else { "FAIL" };
        let _ =
            writeln!(text, "{:<18} {:>12.6} {:>12.6} {:>10.4} {:>8.4} {:>10}  {verdict}", r.quantity, r.analytical, r.empirical, r.rel_error, r.ks_d, r.threshold);
    }
    print!("{text}");
    let mut hist_rows = hist_rows_of("shift", &report.shift_histogram);
    hist_rows.extend(hist_rows_of("s2", &report.s2_histogram));
    match cli.format {
        Format::Csv => {
            write(&cli.out.join("dist.csv"), &to_csv(&report.rows)?)?;
            write(&cli.out.join("histograms.csv"), &to_csv(&hist_rows)?)?;
        }
        Format::Json => {
            let doc = serde_json::json!({ "seed": seed, "rng": RNG_ALGORITHM, "rows": report.rows, "histograms": hist_rows });
            write(&cli.out.join("dist.json"), &to_json(&doc)?)?;
        }
    }
    write(&cli.out.join("dist.txt"), &text)?;
    Ok(if report.passed() { 0 } else { 1 })
}

fn experiment(cli: &Cli) -> anyhow::Result<(ExperimentConfig, Splits)> {
    let mut cfg: ExperimentConfig = read_config(cli)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let base = cli.config.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
    let data = cfg.dataset.load(base).context("cannot load dataset")?;
    Ok((cfg, data))
}

#[derive(Serialize)]
struct FinalRow {
    seed: u64,
    final_val_acc: f64,
    test_acc: f64,
    diverged: bool,
}

/// Writes the run and summary tables of `result` under `stem`.
fn write_sweep(cli: &Cli, stem: &str, result: &SweepResult) -> anyhow::Result<()> {
    match cli.format {
        Format::Csv => {
            write(&cli.out.join(format!("{stem}_runs.csv")), &result.runs_csv()?)?;
            write(&cli.out.join(format!("{stem}_summary.csv")), &result.summary_csv()?)?;
        }
        Format::Json => write(&cli.out.join(format!("{stem}.json")), &(result.to_json() + "\n"))?,
    }
    Ok(())
}

fn train_once(cli: &Cli, cfg: &ExperimentConfig, data: &Splits, stem: &str) -> anyhow::Result<SweepResult> {
    let spec = cfg.spec(data.train.dim, data.train.classes);
    let result = run_cells(&[(f64::NAN, spec)], &cfg.train_config(), data, &[cfg.seed], 1)?;
    let run = &result.runs[0];
    let m = &run.metrics;
    let fin = FinalRow { seed: cfg.seed, final_val_acc: m.final_val_acc(), test_acc: m.test_acc, diverged: m.diverged };
    match cli.format {
        Format::Csv => {
            write(&cli.out.join(format!("{stem}.csv")), &to_csv(&m.epochs)?)?;
            write(&cli.out.join(format!("{stem}_final.csv")), &to_csv(&[&fin])?)?;
        }
        Format::Json => {
            let doc = serde_json::json!({ "seed": cfg.seed, "rng": RNG_ALGORITHM, "epochs": m.epochs, "final": fin });
            write(&cli.out.join(format!("{stem}.json")), &to_json(&doc)?)?;
        }
    }
    println!("{}", seed_line(cfg.seed));
    for e in &m.epochs {
        println!("epoch {:>3}  lr {:.5}  train_loss {:.4}  train_acc {:.4}  val_acc {:.4}", e.epoch, e.lr, e.train_loss, e.train_acc, e.val_acc);
    }
    println!("test_acc {:.4}{}", m.test_acc, if m.diverged { "  (diverged)" } else { "" });
    Ok(result)
}

fn cmd_train(cli: &Cli) -> anyhow::Result<i32> {
    let (cfg, data) = experiment(cli)?;
    train_once(cli, &cfg, &data, "metrics")?;
    Ok(0)
}

fn cmd_sweep(cli: &Cli, parallel: usize) -> anyhow::Result<i32> {
    let (cfg, data) = experiment(cli)?;
    let Some(sw) = &cfg.sweep else { bail!("config has no `sweep` section") };
    let mut seeds = sw.seeds.clone();
    if let Some(s) = cli.seed {
        // the override shifts every seed so the whole sweep is replayable from one number
        seeds.iter_mut().for_each(|x| *x = x.wrapping_add(s));
    }
    let spec = cfg.spec(data.train.dim, data.train.classes);
    let result = ghostnoise_train::sweep(&spec, &cfg.train_config(), &data, &sw.axis, &seeds, parallel)?;
    write_sweep(cli, "sweep", &result)?;
    println!("{}", seed_line(cli.seed.unwrap_or(0)));
    print!("{}", ghostnoise_train::sweep::format_summary(&result.summary()));
    for (v, d, n) in result.divergence_counts() {
        if d > 0 {
            println!("axis value {v}: {d}/{n} runs diverged");
        }
    }
    Ok(0)
}

fn cmd_noise_stats(cli: &Cli) -> anyhow::Result<i32> {
    let (mut cfg, data) = experiment(cli)?;
    if cfg.trace_epochs.is_empty() {
        cfg.trace_epochs = vec![1, cfg.epochs];
        cfg.trace_epochs.dedup();
    }
    let spec = cfg.spec(data.train.dim, data.train.classes);
    if !spec.injectors.iter().any(|i| matches!(i, ghostnoise_core::Injector::Gni(_) | ghostnoise_core::Injector::Agni { .. })) {
        bail!("noise-stats needs a `gni` or `agni` injector in the config");
    }
    let result = train_once(cli, &cfg, &data, "metrics")?;
    let dir = cli.out.join("traces");
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut files = 0;
    for trace in &result.runs[0].metrics.traces {
        for rec in trace.records() {
            let name = trace_file_name(&rec, cli.format);
            let text = match cli.format {
                Format::Csv => rec.to_csv(),
                Format::Json => rec.to_json() + "\n",
            };
            write(&dir.join(name), &text)?;
            files += 1;
        }
    }
    println!("{files} trace files in {}", dir.display());
    Ok(0)
}

pub fn trace_file_name(rec: &TraceRecord, format: Format) -> String {
    let ext = match format {
        Format::Csv => "csv",
        Format::Json => "json",
    };
    format!("{}_epoch{}_{}.{ext}", rec.layer, rec.epoch, rec.kind.as_str())
}
