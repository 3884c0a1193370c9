//! End-to-end experiment pipelines: train hedge coefficients, price in and
//! out of sample, fit and evaluate the exercise policy, simulate P&L, and
//! emit CSV reports.
//!
//! Every pipeline is deterministic given the config: identical inputs yield
//! byte-identical CSV output except for the wall-time field, which each
//! writer keeps in a fixed trailing position so consumers can strip it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::artifact::{AlphaArtifact, PolicyArtifact};
use crate::basis::{calibrate_mapping, BasisEvaluator};
use crate::config::{ExperimentConfig, RogersReference};
use crate::dual::{
    dual_price_out_of_sample, run_backward, weighted_price, DualEstimate, GbmSource, SolvedDual,
};
use crate::error::{Error, Result};
use crate::instruments::InstrumentEvaluator;
use crate::lattice::{snell_solve, BinomialModel, SnellTable};
use crate::model::{tradable_factor, PathStore};
use crate::payoff::RewardMatrix;
use crate::pnl::{delta_hedge_pnl, histogram, simulate_pnl, PnlReport};
use crate::primal::{fit_policy, stopping_times, ExercisePolicy};
use crate::rogers::{minimize_scalar_dual, reference_martingale, ReferencePortfolio};

/// Generate a path store for `q` paths under the config's storage policy.
pub fn build_store(cfg: &ExperimentConfig, q: usize, seed: u64) -> Result<PathStore> {
    PathStore::generate(
        cfg.params.clone(),
        cfg.grid,
        q,
        seed,
        cfg.store_mode(q),
        cfg.run.chunk,
    )
}

/// Everything produced by one backward training pass.
pub struct Trained {
    pub store: PathStore,
    pub rewards: RewardMatrix,
    pub evaluator: BasisEvaluator,
    pub instruments: InstrumentEvaluator,
    pub solved: SolvedDual,
}

/// Calibrate mappings and solve the backward regressions on fresh training
/// paths drawn from the config's training seed.
pub fn train(cfg: &ExperimentConfig) -> Result<Trained> {
    let store = build_store(cfg, cfg.run.q_train, cfg.run.seed_train)?;
    let rewards = RewardMatrix::build(&cfg.payoff, &store)?;
    let mapping = calibrate_mapping(&cfg.basis, &store, &cfg.payoff, cfg.moments)?;
    let evaluator = BasisEvaluator::new(cfg.basis.clone(), mapping, cfg.params.d);
    let instruments = InstrumentEvaluator::new(cfg.instrument_set(), &cfg.params, &cfg.grid)?;
    let solved = run_backward(&GbmSource::new(&store, &instruments, &evaluator), &rewards)?;
    Ok(Trained { store, rewards, evaluator, instruments, solved })
}

/// Training-path and fresh-path dual estimates plus the reusable artifact.
#[derive(Debug)]
pub struct DualPriceRun {
    pub in_sample: DualEstimate,
    pub out_sample: DualEstimate,
    pub artifact: AlphaArtifact,
}

/// Full dual pricing pipeline: train, then re-price on fresh paths.
pub fn price_dual(cfg: &ExperimentConfig) -> Result<DualPriceRun> {
    let t = train(cfg)?;
    drop(t.store); // the fresh store below may be large; free training spots first
    let fresh = build_store(cfg, cfg.run.q_oos, cfg.run.seed_oos)?;
    let fresh_rewards = RewardMatrix::build(&cfg.payoff, &fresh)?;
    let source = GbmSource::new(&fresh, &t.instruments, &t.evaluator);
    let out_sample = dual_price_out_of_sample(
        &t.solved.alpha,
        &source,
        &fresh_rewards,
        Some(cfg.run.seed_train),
    )?;
    Ok(DualPriceRun {
        in_sample: t.solved.in_sample,
        out_sample,
        artifact: AlphaArtifact {
            seed_train: cfg.run.seed_train,
            basis: cfg.basis.clone(),
            mapping: t.evaluator.mapping,
            alpha: t.solved.alpha,
        },
    })
}

/// Fitted policy plus its fresh-path lower-bound price.
#[derive(Debug)]
pub struct LsRun {
    pub policy: ExercisePolicy,
    pub price: DualEstimate,
}

/// Longstaff–Schwarz pipeline: fit on training paths, price on fresh paths.
pub fn price_ls(cfg: &ExperimentConfig) -> Result<LsRun> {
    let policy = {
        let store = build_store(cfg, cfg.q_ls, cfg.run.seed_train)?;
        let rewards = RewardMatrix::build(&cfg.payoff, &store)?;
        fit_policy(&store, &rewards, cfg.ls_degree)?
    };
    let fresh = build_store(cfg, cfg.run.q_oos, cfg.run.seed_oos)?;
    let fresh_rewards = RewardMatrix::build(&cfg.payoff, &fresh)?;
    let price = crate::primal::price_lower_bound(&policy, &fresh, &fresh_rewards)?;
    Ok(LsRun { policy, price })
}

/// Knobs for the P&L pipeline beyond the config file.
#[derive(Debug, Clone, Default)]
pub struct PnlOptions {
    /// Evaluate the hedge on the out-of-sample pricing paths instead of the
    /// third seed.
    pub reuse_oos_paths: bool,
    /// Load trained coefficients instead of training in-process.
    pub alpha_path: Option<PathBuf>,
    /// Load a fitted exercise policy instead of fitting in-process.
    pub policy_path: Option<PathBuf>,
    /// Hedge with the lattice delta instead of the regression coefficients
    /// (single-asset only); the premium charged is the lattice price.
    pub delta_hedge: bool,
    /// Tree steps per subtick for the delta hedge; 0 picks the smallest
    /// refinement with at least 500 steps in total.
    pub refine: usize,
}

/// P&L pipeline outputs: the charged price, the buyer's benchmark, and the
/// hedged distribution.
#[derive(Debug)]
pub struct PnlRun {
    pub upper: DualEstimate,
    pub ls_price: DualEstimate,
    pub report: PnlReport,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

fn check_alpha_artifact(cfg: &ExperimentConfig, art: &AlphaArtifact) -> Result<()> {
    let dbar = cfg.instrument_set().dbar();
    let a = &art.alpha;
    if a.n != cfg.grid.n || a.nbar != cfg.grid.nbar || a.dbar != dbar {
        return Err(Error::config(format!(
            "coefficient artifact shape ({}, {}, {}) does not match the config ({}, {}, {dbar})",
            a.n, a.nbar, a.dbar, cfg.grid.n, cfg.grid.nbar
        )));
    }
    if art.basis != cfg.basis {
        return Err(Error::config("coefficient artifact basis does not match the config"));
    }
    Ok(())
}

/// Build the lattice for delta hedging with `refine` tree steps per subtick
/// (0 = smallest refinement reaching 500 steps).
pub fn delta_lattice(cfg: &ExperimentConfig, refine: usize) -> Result<SnellTable> {
    let per_refine = cfg.grid.n * cfg.grid.nbar;
    let refine = if refine > 0 { refine } else { 500usize.div_ceil(per_refine) };
    let model = BinomialModel::from_grid(&cfg.params, &cfg.grid, refine)?;
    snell_solve(&model, &cfg.payoff)
}

/// Simulate the hedged P&L distribution. Artifacts named in `opts` are
/// loaded and validated before any simulation or output.
pub fn run_pnl(cfg: &ExperimentConfig, opts: &PnlOptions) -> Result<PnlRun> {
    // Resolve artifacts first: a missing or mismatched file must fail before
    // any expensive work or partial output.
    let loaded_alpha = match &opts.alpha_path {
        Some(p) => {
            let art = AlphaArtifact::load(p)?;
            check_alpha_artifact(cfg, &art)?;
            Some(art)
        }
        None => None,
    };
    let loaded_policy = match &opts.policy_path {
        Some(p) => {
            let art = PolicyArtifact::load(p)?;
            if art.policy.n != cfg.grid.n || art.policy.d != cfg.params.d {
                return Err(Error::config(
                    "policy artifact shape does not match the config".to_string(),
                ));
            }
            Some(art.policy)
        }
        None => None,
    };
    let lattice = if opts.delta_hedge { Some(delta_lattice(cfg, opts.refine)?) } else { None };

    let artifact = match loaded_alpha {
        Some(art) => art,
        None => {
            let t = train(cfg)?;
            AlphaArtifact {
                seed_train: cfg.run.seed_train,
                basis: cfg.basis.clone(),
                mapping: t.evaluator.mapping,
                alpha: t.solved.alpha,
            }
        }
    };
    let policy = match loaded_policy {
        Some(p) => p,
        None => {
            let store = build_store(cfg, cfg.q_ls, cfg.run.seed_train)?;
            let rewards = RewardMatrix::build(&cfg.payoff, &store)?;
            fit_policy(&store, &rewards, cfg.ls_degree)?
        }
    };

    let evaluator =
        BasisEvaluator::new(artifact.basis.clone(), artifact.mapping.clone(), cfg.params.d);
    let instruments = InstrumentEvaluator::new(cfg.instrument_set(), &cfg.params, &cfg.grid)?;

    // Price the hedge on the out-of-sample seed, then evaluate it on the
    // P&L seed (or on the same paths when asked to reuse them).
    let fresh = build_store(cfg, cfg.run.q_oos, cfg.run.seed_oos)?;
    let fresh_rewards = RewardMatrix::build(&cfg.payoff, &fresh)?;
    let upper = dual_price_out_of_sample(
        &artifact.alpha,
        &GbmSource::new(&fresh, &instruments, &evaluator),
        &fresh_rewards,
        Some(artifact.seed_train),
    )?;

    let (eval_store, eval_rewards) = if opts.reuse_oos_paths {
        (fresh, fresh_rewards)
    } else {
        drop(fresh);
        let store = build_store(cfg, cfg.run.q_pnl, cfg.run.seed_pnl)?;
        let rewards = RewardMatrix::build(&cfg.payoff, &store)?;
        (store, rewards)
    };

    let stops = stopping_times(&policy, &eval_store, &eval_rewards)?;
    let exercised: Vec<f64> =
        (0..eval_store.q).map(|q| eval_rewards.row(q)[stops[q]]).collect();
    let ls_price = weighted_price(&exercised, None);

    let samples = match &lattice {
        Some(table) => {
            delta_hedge_pnl(table, &eval_store, &eval_rewards, &stops, table.price())?
        }
        None => simulate_pnl(
            &artifact.alpha,
            &GbmSource::new(&eval_store, &instruments, &evaluator),
            &eval_rewards,
            &stops,
            upper.price,
        )?,
    };
    let report = PnlReport::from_samples(&samples, None)?;
    let (edges, counts) = histogram(&samples, cfg.bins)?;
    Ok(PnlRun { upper, ls_price, report, edges, counts })
}

/// Scalar-dual pipeline result.
#[derive(Debug)]
pub struct RogersRun {
    pub multiplier: f64,
    pub price: DualEstimate,
}

/// Minimize the dual bound over scalar multiples of the reference
/// portfolio's discounted value process.
pub fn run_rogers(cfg: &ExperimentConfig) -> Result<RogersRun> {
    let store = build_store(cfg, cfg.q_rogers, cfg.run.seed_train)?;
    let rewards = RewardMatrix::build(&cfg.payoff, &store)?;
    let portfolio = match cfg.rogers_reference {
        RogersReference::Replicating => ReferencePortfolio::for_payoff(&cfg.payoff)?,
        RogersReference::MidStrikePut => ReferencePortfolio::mid_strike_put(&cfg.payoff)?,
    };
    let mref = reference_martingale(&store, &portfolio)?;
    let sd = minimize_scalar_dual(&rewards, &mref, None)?;
    Ok(RogersRun { multiplier: sd.multiplier, price: sd.estimate })
}

/// One martingale-check row: discounted tradable value of asset `k` at
/// exercise date `date`, which must average to the initial spot.
#[derive(Debug)]
pub struct CheckRow {
    pub asset: usize,
    pub date: usize,
    pub mean: f64,
    pub se: f64,
    pub z: f64,
}

/// Simulate training paths and z-score the martingale identity per asset
/// and exercise date. Callers treat |z| > 4 as a failure.
pub fn simulate_check(cfg: &ExperimentConfig) -> Result<Vec<CheckRow>> {
    let store = build_store(cfg, cfg.run.q_train, cfg.run.seed_train)?;
    let d = cfg.params.d;
    let dates = cfg.grid.n + 1;
    let cols = dates * d;
    let mut sums = vec![0.0f64; cols];
    let mut sq = vec![0.0f64; cols];
    for q in 0..store.q {
        let row = store.exercise(q);
        for i in 0..dates {
            let t = cfg.grid.time(cfg.grid.exercise_fine(i));
            for k in 0..d {
                let v = tradable_factor(cfg.params.r, cfg.params.delta[k], t) * row[i * d + k];
                sums[i * d + k] += v;
                sq[i * d + k] += v * v;
            }
        }
    }
    let qf = store.q as f64;
    let mut rows = Vec::with_capacity(cols);
    for i in 0..dates {
        for k in 0..d {
            let mean = sums[i * d + k] / qf;
            let var = (sq[i * d + k] / qf - mean * mean).max(0.0);
            let se = (var / qf).sqrt();
            let dev = mean - cfg.params.s0[k];
            let z = if se > 0.0 {
                dev / se
            } else if dev.abs() < 1e-9 * cfg.params.s0[k].abs().max(1.0) {
                0.0
            } else {
                f64::INFINITY
            };
            rows.push(CheckRow { asset: k, date: i, mean, se, z });
        }
    }
    Ok(rows)
}

/// One `table` subcommand row; the run captures failures instead of
/// aborting the whole table.
pub struct TableRow {
    pub config: String,
    pub q: usize,
    pub nbar: usize,
    pub p: usize,
    pub vanilla: bool,
    pub outcome: Result<DualPriceRun>,
    pub wall_seconds: f64,
}

/// Basis-size column for a table row (bins per coordinate, or polynomial
/// degree).
fn basis_param(cfg: &ExperimentConfig) -> usize {
    match cfg.basis {
        crate::basis::BasisSpec::LocalHypercube { p } => p,
        crate::basis::BasisSpec::LocalSignedPayoff { p } => p,
        crate::basis::BasisSpec::Polynomial { eta } => eta,
    }
}

/// Run the dual pricing pipeline for each config file in turn.
pub fn run_table(paths: &[PathBuf]) -> Vec<TableRow> {
    let mut rows = Vec::with_capacity(paths.len());
    for path in paths {
        let started = Instant::now();
        let name = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let row = match ExperimentConfig::load(path) {
            Ok(cfg) => TableRow {
                config: name,
                q: cfg.run.q_train,
                nbar: cfg.grid.nbar,
                p: basis_param(&cfg),
                vanilla: cfg.vanilla,
                outcome: price_dual(&cfg),
                wall_seconds: started.elapsed().as_secs_f64(),
            },
            Err(e) => TableRow {
                config: name,
                q: 0,
                nbar: 0,
                p: 0,
                vanilla: false,
                outcome: Err(e),
                wall_seconds: started.elapsed().as_secs_f64(),
            },
        };
        rows.push(row);
    }
    rows
}

/// CSV header for the `table` subcommand (wall time deliberately last: it is
/// the only nondeterministic field).
pub const TABLE_HEADER: &str =
    "config,q,nbar,p,vanilla,u0,se_u0,u0_oos,se_u0_oos,status,wall_seconds";

fn csv_safe(msg: &str) -> String {
    msg.replace(['\n', '\r'], " ").replace(',', ";")
}

/// Render table rows under `TABLE_HEADER`.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let (u0, se0, oos, seo, status) = match &r.outcome {
            Ok(run) => (
                run.in_sample.price.to_string(),
                run.in_sample.se.to_string(),
                run.out_sample.price.to_string(),
                run.out_sample.se.to_string(),
                "ok".to_string(),
            ),
            Err(e) => (String::new(), String::new(), String::new(), String::new(), csv_safe(&e.to_string())),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            csv_safe(&r.config),
            r.q,
            r.nbar,
            r.p,
            r.vanilla,
            u0,
            se0,
            oos,
            seo,
            status,
            r.wall_seconds
        ));
    }
    out
}

/// Render the P&L histogram as `edge_lo,edge_hi,count` rows.
pub fn histogram_csv(edges: &[f64], counts: &[u64]) -> String {
    let mut out = String::from("edge_lo,edge_hi,count\n");
    for (b, &c) in counts.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", edges[b], edges[b + 1], c));
    }
    out
}

/// Render `metric,value` rows; the caller appends the wall-time row last.
pub fn summary_csv(rows: &[(&str, f64)]) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in rows {
        out.push_str(&format!("{name},{value}\n"));
    }
    out
}

/// Write a file, creating parent directories as needed.
pub fn write_output(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, content)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn tiny_cfg() -> ExperimentConfig {
        let toml = r#"
[model]
d = 1
s0 = 100.0
sigma = 0.4
r = 0.06

[grid]
horizon = 0.5
n = 5
nbar = 1

[payoff]
kind = "put"
strike = 100.0

[basis]
family = "local_hypercube"
p = 4

[instruments]
vanilla = true

[run]
q_train = 4000
q_oos = 4000
q_pnl = 4000
seed_train = 11
seed_oos = 22
seed_pnl = 33

[ls]
degree = 4
"#;
        ExperimentConfig::from_toml_str(toml).unwrap()
    }

    #[test]
    fn dual_and_ls_pipelines_bracket_the_price() {
        let cfg = tiny_cfg();
        let dual = price_dual(&cfg).unwrap();
        let ls = price_ls(&cfg).unwrap();
        // Weak duality with Monte Carlo slack: lower bound under upper bound.
        let slack = 2.0 * (dual.out_sample.se + ls.price.se);
        assert!(
            ls.price.price <= dual.out_sample.price + slack,
            "ls {} vs dual {}",
            ls.price.price,
            dual.out_sample.price
        );
        assert!(dual.in_sample.price > 5.0 && dual.in_sample.price < 15.0);
    }

    #[test]
    fn pnl_pipeline_reports_and_balances() {
        let cfg = tiny_cfg();
        let run = run_pnl(&cfg, &PnlOptions::default()).unwrap();
        assert_eq!(run.counts.iter().sum::<u64>(), cfg.run.q_pnl as u64);
        assert_eq!(run.report.count, cfg.run.q_pnl);
        // Mean hedged P&L is the dual price minus the exercised value.
        let gap = run.report.mean - (run.upper.price - run.ls_price.price);
        let tol = 4.0 * (run.report.se_mean + run.ls_price.se + run.upper.se);
        assert!(gap.abs() <= tol, "gap {gap} tol {tol}");
    }

    #[test]
    fn pnl_rejects_missing_artifacts_before_output() {
        let cfg = tiny_cfg();
        let opts = PnlOptions {
            policy_path: Some(PathBuf::from("/nonexistent/policy.bin")),
            ..PnlOptions::default()
        };
        let err = run_pnl(&cfg, &opts).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn simulate_check_z_scores_are_small() {
        let cfg = tiny_cfg();
        let rows = simulate_check(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.z.abs() < 4.0), "martingale drift detected");
        assert_eq!(rows[0].mean, 100.0); // date 0 is the initial spot
    }

    #[test]
    fn table_csv_records_failures_and_keeps_going() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.toml");
        write_output(&good, TINY_TOML).unwrap();
        let bad = dir.path().join("bad.toml");
        write_output(&bad, "not toml at all").unwrap();
        let rows = run_table(&[bad, good]);
        let csv = table_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TABLE_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("bad,") && lines[1].contains("parse"));
        assert!(lines[2].starts_with("good,") && lines[2].contains(",ok,"));
    }

    const TINY_TOML: &str = r#"
[model]
d = 1
s0 = 100.0
sigma = 0.4
r = 0.06

[grid]
horizon = 0.5
n = 3
nbar = 1

[payoff]
kind = "put"
strike = 100.0

[basis]
family = "local_hypercube"
p = 2

[instruments]
vanilla = false

[run]
q_train = 1000
q_oos = 1000
q_pnl = 1000
seed_train = 1
seed_oos = 2
seed_pnl = 3

[ls]
degree = 2
"#;

    #[test]
    fn rogers_runs_on_the_put() {
        let cfg = tiny_cfg();
        let run = run_rogers(&cfg).unwrap();
        assert!(run.price.price > 5.0 && run.price.price < 20.0);
        assert!(run.multiplier > -1.0 && run.multiplier < 3.0);
    }
}
