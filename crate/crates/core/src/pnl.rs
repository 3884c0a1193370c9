//! Profit-and-loss simulation of the discrete hedges.
//!
//! Selling the option at the out-of-sample dual price and running the
//! regression-coefficient hedge until a stopping rule fires gives the
//! pathwise P&L
//!
//!   price + sum_{i < tau} dM_{i+1} - Z_tau,
//!
//! all in discounted units. The same accounting with lattice deltas in
//! place of the regression hedge gives the classical delta-hedge benchmark
//! for one-asset models.

use crate::dual::{increment_dm, AlphaTensor, DualSource, PathScratch, StageData};
use crate::error::{Error, Result};
use crate::lattice::SnellTable;
use crate::model::PathStore;
use crate::payoff::RewardMatrix;
use rayon::prelude::*;

/// Default number of equal-width histogram bins.
pub const DEFAULT_BINS: usize = 80;

fn check_stops(stops: &[usize], q: usize, n: usize) -> Result<()> {
    if stops.len() != q {
        return Err(Error::config("stopping-time vector length does not match the paths"));
    }
    if stops.iter().any(|&s| s > n) {
        return Err(Error::config("stopping time beyond the last exercise date"));
    }
    Ok(())
}

/// Per-path P&L of the regression hedge: sell at `price`, accumulate the
/// fitted martingale increments until the path's stopping date, deliver the
/// exercised payoff.
pub fn simulate_pnl<S: DualSource>(
    alpha: &AlphaTensor,
    source: &S,
    rewards: &RewardMatrix,
    stops: &[usize],
    price: f64,
) -> Result<Vec<f64>> {
    if rewards.q != source.q() || rewards.dates != source.n() + 1 {
        return Err(Error::config("reward matrix does not match the source"));
    }
    if alpha.n != source.n()
        || alpha.nbar != source.nbar()
        || alpha.pbar != source.pbar()
        || alpha.dbar != source.dbar()
    {
        return Err(Error::config("coefficient tensor shape does not match the source"));
    }
    check_stops(stops, source.q(), source.n())?;
    let q = source.q();
    let chunk = source.chunk();
    let mut gain = vec![0.0f64; q];
    for i in 0..source.n() {
        let stage = source.load_stage(i)?;
        let stage_ref = &stage;
        gain.par_chunks_mut(chunk).enumerate().for_each(|(ci, gc)| {
            let lo = ci * chunk;
            let mut s = PathScratch::for_source(source);
            for (off, g) in gc.iter_mut().enumerate() {
                let path = lo + off;
                if stops[path] > i {
                    stage_ref.fill_path(path, &mut s);
                    *g += increment_dm(alpha, i, &s);
                }
            }
        });
    }
    Ok((0..q).map(|p| price + gain[p] - rewards.row(p)[stops[p]]).collect())
}

/// Per-path P&L of the classical delta hedge for one-asset models: the
/// holding in the discounted asset comes from the lattice value function,
/// rebalanced at every subtick until the stopping date.
pub fn delta_hedge_pnl(
    table: &SnellTable,
    store: &PathStore,
    rewards: &RewardMatrix,
    stops: &[usize],
    price: f64,
) -> Result<Vec<f64>> {
    if store.params.d != 1 {
        return Err(Error::config("the delta-hedge benchmark is only defined for d = 1"));
    }
    if rewards.q != store.q || rewards.dates != store.grid.n + 1 {
        return Err(Error::config("reward matrix does not match the path store"));
    }
    check_stops(stops, store.q, store.grid.n)?;
    let model = &table.model;
    let fine_count = store.grid.fine_count() - 1;
    if model.steps % fine_count != 0 {
        return Err(Error::config("lattice steps must be a multiple of the subtick count"));
    }
    if (model.horizon - store.grid.horizon).abs() > 1e-12 * store.grid.horizon
        || (model.s0 - store.params.s0[0]).abs() > 1e-12 * store.params.s0[0]
    {
        return Err(Error::config("lattice and path store disagree on the model"));
    }
    let refine = model.steps / fine_count;
    let nbar = store.grid.nbar;
    // Discounted-asset factor e^((delta - r) t) per fine tick.
    let xfac: Vec<f64> = (0..=fine_count)
        .map(|ft| ((store.params.delta[0] - store.params.r) * store.grid.time(ft)).exp())
        .collect();
    let mut gain = vec![0.0f64; store.q];
    let mut fail: Option<Error> = None;
    for i in 0..store.grid.n {
        let slab = store.slab(i);
        let errs: Vec<Option<Error>> = gain
            .par_chunks_mut(store.chunk)
            .enumerate()
            .map(|(ci, gc)| {
                let lo = ci * store.chunk;
                for (off, g) in gc.iter_mut().enumerate() {
                    let path = lo + off;
                    if stops[path] <= i {
                        continue;
                    }
                    let spots = slab.path(path);
                    for lf in 0..nbar {
                        let ft = i * nbar + lf;
                        let h = match table.holding_at(ft * refine, spots[lf]) {
                            Ok(h) => h,
                            Err(e) => return Some(e),
                        };
                        let dx = xfac[ft + 1] * spots[lf + 1] - xfac[ft] * spots[lf];
                        *g += h * dx;
                    }
                }
                None
            })
            .collect();
        if let Some(e) = errs.into_iter().flatten().next() {
            fail = Some(e);
            break;
        }
    }
    if let Some(e) = fail {
        return Err(e);
    }
    Ok((0..store.q).map(|p| price + gain[p] - rewards.row(p)[stops[p]]).collect())
}

/// Equal-width histogram over [min, max]; a degenerate span widens to one
/// unit around the common value. Counts sum to the sample size.
pub fn histogram(samples: &[f64], bins: usize) -> Result<(Vec<f64>, Vec<u64>)> {
    if samples.is_empty() {
        return Err(Error::config("histogram needs at least one sample"));
    }
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    let (mut lo, mut hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::numeric("histogram input contains non-finite values"));
    }
    if hi <= lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|b| lo + b as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for &x in samples {
        let idx = (((x - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok((edges, counts))
}

/// Summary statistics of a P&L sample.
#[derive(Debug, Clone)]
pub struct PnlReport {
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    /// 5% and 95% sample quantiles.
    pub q05: f64,
    pub q95: f64,
    pub count: usize,
}

impl PnlReport {
    /// Weighted moments and quantiles; `weights` defaults to equal.
    pub fn from_samples(samples: &[f64], weights: Option<&[f64]>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::config("P&L report needs at least one sample"));
        }
        if let Some(w) = weights {
            if w.len() != samples.len() {
                return Err(Error::config("weights length does not match the samples"));
            }
        }
        let est = crate::dual::weighted_price(samples, weights);
        let variance = est.se * est.se * samples.len() as f64;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by(|&a, &b| samples[a].total_cmp(&samples[b]));
        let wsum: f64 = weights.map_or(samples.len() as f64, |w| w.iter().sum());
        let quantile = |p: f64| {
            let mut acc = 0.0;
            for &idx in &order {
                acc += weights.map_or(1.0, |w| w[idx]);
                if acc >= p * wsum {
                    return samples[idx];
                }
            }
            samples[*order.last().expect("nonempty")]
        };
        Ok(PnlReport {
            mean: est.price,
            variance,
            se_mean: est.se,
            q05: quantile(0.05),
            q95: quantile(0.95),
            count: samples.len(),
        })
    }
}
