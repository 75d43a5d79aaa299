//! Command-line front end: single runs, paired ablation matrices, theory
//! grids, prompt histograms, and dataset generation.
//!
//! Exit codes: 0 success, 2 configuration problem, 3 runtime failure.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use stepalign_core::config::{Overrides, RunConfig};
use stepalign_core::data::{save_dataset, ShiftPreset};
use stepalign_core::error::{Error, Result};
use stepalign_core::report::comparison_csv;
use stepalign_core::theory::{
    contraction_factor, series_converges, theorem1_bound, theorem2_bound, BoundParams,
};
use stepalign_core::train::AblationMode;
use stepalign_core::{harness, report};

#[derive(Parser)]
#[command(
    name = "stepalign",
    version,
    about = "Episodic lab for style-prompt tuning with step-wise distribution alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file; omitted keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the episode count
    #[arg(long)]
    episodes: Option<usize>,
    /// Output path (subcommand-specific format)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the ablation mode
    #[arg(long)]
    ablation: Option<AblationMode>,
    /// Override the domain-shift preset
    #[arg(long)]
    preset: Option<ShiftPreset>,
}

#[derive(Subcommand)]
enum Command {
    /// Tune episodes under one configuration and report aggregate accuracy
    Run(CommonArgs),
    /// Run ablation modes on identical episodes and emit a comparison table
    Ablate(CommonArgs),
    /// Emit a CSV grid of adaptation bounds and the contraction factor
    Theory {
        /// CSV destination; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tune one episode and dump input histograms before/after the prompt
    Histogram(CommonArgs),
    /// Generate the shifted target pool and save it
    GenData(CommonArgs),
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&Overrides {
        seed: common.seed,
        episodes: common.episodes,
        ablation: common.ablation,
        preset: common.preset,
        out: common.out.clone(),
    })?;
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, content)?;
            Ok(())
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn summary_line(r: &report::RunReport) -> String {
    format!(
        "mode={} episodes={} accuracy={:.4}±{:.4} lp={:.4}±{:.4} seconds={:.2}",
        r.config.ablation,
        r.episodes.len(),
        r.accuracy.mean,
        r.accuracy.ci95,
        r.accuracy_lp.mean,
        r.accuracy_lp.ci95,
        r.timing.wall_clock_seconds
    )
}

fn cmd_run(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let report = harness::run(&cfg)?;
    if let Some(path) = &cfg.out {
        report.write(path)?;
    }
    println!("{}", summary_line(&report));
    Ok(())
}

fn cmd_ablate(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    // --ablation restricts the matrix to one mode; default is all of them
    let modes: Vec<AblationMode> = match common.ablation {
        Some(mode) => vec![mode],
        None => AblationMode::ALL.to_vec(),
    };
    let reports = harness::run_ablation_matrix(&cfg, &modes)?;
    for r in &reports {
        eprintln!("{}", summary_line(r));
    }
    write_or_print(cfg.out.as_deref(), &comparison_csv(&reports))
}

/// Bound values over a τ·R grid with the source terms normalized to 1
/// (R = 1, source loss and initial gap 1, no sample-size term). Cells are
/// empty where a bound is outside its regime or the factor is singular.
fn theory_csv() -> String {
    let fmt = |v: Result<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(
        "tau_r,steps_e,theorem1,theorem2,contraction_w0,contraction_w_pi,series_converges\n",
    );
    let taus = (1..=9).chain(11..=100).map(|k| k as f64 / 10.0);
    for tau in taus {
        for steps_e in [0usize, 2, 10, 20, 40] {
            let t1 = fmt(theorem1_bound(tau, 1.0, 1.0, 0.0, 1, 0.0));
            let t2 = fmt(theorem2_bound(&BoundParams {
                tau_m: tau,
                r: 1.0,
                steps_e,
                alpha0: 1.0,
                n: 1,
                c_order: 0.0,
            }));
            let c0 = fmt(contraction_factor(tau, 1.0, 0.0));
            let cpi = fmt(contraction_factor(tau, 1.0, std::f64::consts::PI));
            let conv = series_converges(tau, 1.0);
            out.push_str(&format!("{tau},{steps_e},{t1},{t2},{c0},{cpi},{conv}\n"));
        }
    }
    out
}

fn cmd_histogram(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let csv = harness::run_histogram(&cfg)?;
    write_or_print(cfg.out.as_deref(), &csv)
}

fn cmd_gen_data(common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| Error::config("gen-data requires --out (or `out` in the config)"))?;
    let pool = harness::build_target_pool(&cfg)?;
    save_dataset(out, &pool)?;
    println!(
        "wrote {} samples x {} dims across {} classes to {}",
        pool.len(),
        pool.dim(),
        pool.class_count(),
        out.display()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run(common) => cmd_run(common),
        Command::Ablate(common) => cmd_ablate(common),
        Command::Theory { out } => write_or_print(out.as_deref(), &theory_csv()),
        Command::Histogram(common) => cmd_histogram(common),
        Command::GenData(common) => cmd_gen_data(common),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e}");
        std::process::exit(if e.is_config() { 2 } else { 3 });
    }
}
