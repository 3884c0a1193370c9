//! Batch experiment runner: prices Bermudan options by least-squares dual
//! martingales, benchmarks them against a regression-policy lower bound and
//! a scalar dual, and simulates the hedged P&L.
//!
//! Every subcommand reads one TOML experiment config (the `table` command
//! takes several) and writes CSV reports under the output directory. Exit
//! codes: 0 success, 2 configuration or I/O error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use dualhedge::artifact::PolicyArtifact;
use dualhedge::config::ExperimentConfig;
use dualhedge::error::{Error, Result};
use dualhedge::parallel::with_workers;
use dualhedge::run;

#[derive(Parser)]
#[command(
    name = "dualhedge",
    version,
    about = "Bermudan option pricing and hedging with regression-built dual martingales"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Overrides {
    /// Override the training seed from the config.
    #[arg(long, global = true)]
    seed_train: Option<u64>,
    /// Override the out-of-sample pricing seed from the config.
    #[arg(long, global = true)]
    seed_oos: Option<u64>,
    /// Override the P&L evaluation seed from the config.
    #[arg(long, global = true)]
    seed_pnl: Option<u64>,
    /// Worker threads (0 = library default).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Paths per reduction chunk.
    #[arg(long, global = true)]
    chunk_size: Option<usize>,
    /// Output directory (overrides the config's output section).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate training paths and z-score the martingale identity.
    SimulateCheck { config: PathBuf },
    /// Train hedge coefficients; report training and fresh-path dual prices.
    PriceDual { config: PathBuf },
    /// Fit the exercise policy; report its fresh-path lower-bound price.
    PriceLs { config: PathBuf },
    /// Simulate the hedged P&L distribution.
    Pnl {
        config: PathBuf,
        /// Evaluate on the out-of-sample pricing paths instead of the
        /// dedicated P&L seed.
        #[arg(long)]
        reuse_oos_paths: bool,
        /// Load trained hedge coefficients instead of training in-process.
        #[arg(long)]
        alpha: Option<PathBuf>,
        /// Load a fitted exercise policy instead of fitting in-process.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Hedge with the lattice delta instead (single-asset only).
        #[arg(long)]
        delta_hedge: bool,
        /// Lattice steps per subtick for --delta-hedge (0 = auto).
        #[arg(long, default_value_t = 0)]
        refine: usize,
        /// Histogram bin count (overrides the config).
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Minimize the dual bound over one scalar reference-portfolio weight.
    Rogers { config: PathBuf },
    /// Price every listed config and write one CSV row per config.
    Table { configs: Vec<PathBuf> },
}

fn load_config(path: &Path, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = o.seed_train {
        cfg.run.seed_train = s;
    }
    if let Some(s) = o.seed_oos {
        cfg.run.seed_oos = s;
    }
    if let Some(s) = o.seed_pnl {
        cfg.run.seed_pnl = s;
    }
    if let Some(c) = o.chunk_size {
        cfg.run.chunk = c;
    }
    if let Some(w) = o.workers {
        cfg.run.workers = w;
    }
    if let Some(dir) = &o.out {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn simulate_check(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let rows = run::simulate_check(cfg)?;
    let mut csv = String::from("asset,date,mean,se,z\n");
    let mut worst: f64 = 0.0;
    for r in &rows {
        csv.push_str(&format!("{},{},{},{},{}\n", r.asset, r.date, r.mean, r.se, r.z));
        worst = worst.max(r.z.abs());
    }
    run::write_output(&cfg.out_dir.join("simulate_check.csv"), &csv)?;
    println!("checked {} (asset, date) pairs; worst |z| = {worst:.3}", rows.len());
    if worst > 4.0 {
        return Err(Error::numeric(format!(
            "martingale property violated: worst |z| = {worst:.3} exceeds 4"
        )));
    }
    Ok(())
}

fn price_dual(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let started = Instant::now();
    let out = run::price_dual(cfg)?;
    let wall = started.elapsed().as_secs_f64();
    out.artifact.save(&cfg.out_dir.join("alpha.bin"))?;
    let csv = run::summary_csv(&[
        ("u0", out.in_sample.price),
        ("se_u0", out.in_sample.se),
        ("u0_oos", out.out_sample.price),
        ("se_u0_oos", out.out_sample.se),
        ("q_train", cfg.run.q_train as f64),
        ("q_oos", cfg.run.q_oos as f64),
        ("seed_train", cfg.run.seed_train as f64),
        ("seed_oos", cfg.run.seed_oos as f64),
        ("wall_seconds", wall),
    ]);
    run::write_output(&cfg.out_dir.join("price_dual.csv"), &csv)?;
    println!(
        "dual price: {:.6} +/- {:.6} (training paths), {:.6} +/- {:.6} (fresh paths)",
        out.in_sample.price, out.in_sample.se, out.out_sample.price, out.out_sample.se
    );
    Ok(())
}

fn price_ls(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let started = Instant::now();
    let out = run::price_ls(cfg)?;
    let wall = started.elapsed().as_secs_f64();
    PolicyArtifact { seed_train: cfg.run.seed_train, policy: out.policy }
        .save(&cfg.out_dir.join("policy.bin"))?;
    let csv = run::summary_csv(&[
        ("ls_price", out.price.price),
        ("se_ls_price", out.price.se),
        ("degree", cfg.ls_degree as f64),
        ("q_ls", cfg.q_ls as f64),
        ("q_oos", cfg.run.q_oos as f64),
        ("wall_seconds", wall),
    ]);
    run::write_output(&cfg.out_dir.join("price_ls.csv"), &csv)?;
    println!("policy lower bound: {:.6} +/- {:.6}", out.price.price, out.price.se);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn pnl(cfg: &mut ExperimentConfig, opts: run::PnlOptions, bins: Option<usize>) -> Result<()> {
    if let Some(b) = bins {
        cfg.bins = b;
        cfg.validate()?;
    }
    ensure_out_dir(cfg)?;
    let started = Instant::now();
    let out = run::run_pnl(cfg, &opts)?;
    let wall = started.elapsed().as_secs_f64();
    run::write_output(
        &cfg.out_dir.join("histogram.csv"),
        &run::histogram_csv(&out.edges, &out.counts),
    )?;
    let csv = run::summary_csv(&[
        ("u0_oos", out.upper.price),
        ("se_u0_oos", out.upper.se),
        ("exercised_value", out.ls_price.price),
        ("se_exercised_value", out.ls_price.se),
        ("mean", out.report.mean),
        ("variance", out.report.variance),
        ("se_mean", out.report.se_mean),
        ("q05", out.report.q05),
        ("q95", out.report.q95),
        ("count", out.report.count as f64),
        ("bins", out.counts.len() as f64),
        ("wall_seconds", wall),
    ]);
    run::write_output(&cfg.out_dir.join("summary.csv"), &csv)?;
    println!(
        "hedged P&L: mean {:.6}, variance {:.6}, q05 {:.4}, q95 {:.4} over {} paths",
        out.report.mean, out.report.variance, out.report.q05, out.report.q95, out.report.count
    );
    Ok(())
}

fn rogers(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let started = Instant::now();
    let out = run::run_rogers(cfg)?;
    let wall = started.elapsed().as_secs_f64();
    let csv = run::summary_csv(&[
        ("multiplier", out.multiplier),
        ("price", out.price.price),
        ("se_price", out.price.se),
        ("q", cfg.q_rogers as f64),
        ("wall_seconds", wall),
    ]);
    run::write_output(&cfg.out_dir.join("rogers.csv"), &csv)?;
    println!(
        "scalar dual: {:.6} +/- {:.6} at multiplier {:.6}",
        out.price.price, out.price.se, out.multiplier
    );
    Ok(())
}

fn table(configs: &[PathBuf], o: &Overrides) -> Result<()> {
    let rows = run::run_table(configs);
    let csv = run::table_csv(&rows);
    let dir = o.out.clone().unwrap_or_else(|| PathBuf::from("."));
    run::write_output(&dir.join("table.csv"), &csv)?;
    print!("{csv}");
    let failures = rows.iter().filter(|r| r.outcome.is_err()).count();
    if failures > 0 {
        eprintln!("{failures} of {} rows failed; see the status column", rows.len());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let o = &cli.overrides;
    match cli.cmd {
        Cmd::SimulateCheck { config } => {
            let cfg = load_config(&config, o)?;
            with_workers(cfg.run.workers, || simulate_check(&cfg))
        }
        Cmd::PriceDual { config } => {
            let cfg = load_config(&config, o)?;
            with_workers(cfg.run.workers, || price_dual(&cfg))
        }
        Cmd::PriceLs { config } => {
            let cfg = load_config(&config, o)?;
            with_workers(cfg.run.workers, || price_ls(&cfg))
        }
        Cmd::Pnl { config, reuse_oos_paths, alpha, policy, delta_hedge, refine, bins } => {
            let mut cfg = load_config(&config, o)?;
            let opts = run::PnlOptions {
                reuse_oos_paths,
                alpha_path: alpha,
                policy_path: policy,
                delta_hedge,
                refine,
            };
            with_workers(cfg.run.workers, || pnl(&mut cfg, opts, bins))
        }
        Cmd::Rogers { config } => {
            let cfg = load_config(&config, o)?;
            with_workers(cfg.run.workers, || rogers(&cfg))
        }
        Cmd::Table { configs } => {
            with_workers(o.workers.unwrap_or(0), || table(&configs, o))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
