//! Binomial-tree oracle for single-asset Bermudan options: exact backward
//! induction of the Snell envelope, its Doob-Meyer decomposition, nodal
//! hedge ratios, and exhaustive path enumeration on small trees.
//!
//! Small instances (<= 12 steps, <= 4096 paths) furnish exact fixtures for
//! the regression solver: every identity that holds in expectation holds to
//! rounding when the tree measure is enumerated. Large instances (500+
//! steps) provide convergent reference prices and the delta-hedge provider.

use crate::dual::{DualSource, PathScratch, StageData};
use crate::error::{Error, Result};
use crate::model::{discount_factor, tradable_factor, ModelParams, TimeGrid};
use crate::payoff::PayoffSpec;

/// Recombining CRR tree with a designated subset of exercise steps.
#[derive(Debug, Clone)]
pub struct BinomialModel {
    pub s0: f64,
    pub sigma: f64,
    pub r: f64,
    pub delta: f64,
    pub horizon: f64,
    pub steps: usize,
    /// Sorted tree steps where exercise is allowed; the last equals `steps`.
    pub exercise_steps: Vec<usize>,
    pub up: f64,
    pub down: f64,
    pub p_up: f64,
    pub dt: f64,
}

impl BinomialModel {
    pub fn new(
        s0: f64,
        sigma: f64,
        r: f64,
        delta: f64,
        horizon: f64,
        steps: usize,
        exercise_steps: Vec<usize>,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("tree needs at least one step"));
        }
        if !(s0 > 0.0) || !(sigma >= 0.0) || !(horizon > 0.0) {
            return Err(Error::config("tree needs s0 > 0, sigma >= 0, horizon > 0"));
        }
        if exercise_steps.is_empty()
            || exercise_steps.windows(2).any(|w| w[0] >= w[1])
            || *exercise_steps.last().unwrap() != steps
        {
            return Err(Error::config(
                "exercise steps must be strictly increasing and end at the final step",
            ));
        }
        let dt = horizon / steps as f64;
        let (up, down, p_up) = if sigma == 0.0 {
            // Degenerate tree: both branches ride the forward, reproducing
            // the deterministic zero-volatility path exactly.
            let g = ((r - delta) * dt).exp();
            (g, g, 0.5)
        } else {
            let up = (sigma * dt.sqrt()).exp();
            let down = 1.0 / up;
            let p = (((r - delta) * dt).exp() - down) / (up - down);
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::config(format!(
                    "risk-neutral probability {p} outside (0, 1); refine the tree"
                )));
            }
            (up, down, p)
        };
        Ok(BinomialModel { s0, sigma, r, delta, horizon, steps, exercise_steps, up, down, p_up, dt })
    }

    /// Tree aligned with a simulation grid: `refine` tree steps per subtick,
    /// exercise dates mapped to their exact tree steps.
    pub fn from_grid(params: &ModelParams, grid: &TimeGrid, refine: usize) -> Result<Self> {
        if params.d != 1 {
            return Err(Error::config("binomial oracle covers single-asset models only"));
        }
        if refine == 0 {
            return Err(Error::config("refine must be at least 1"));
        }
        let per_date = grid.nbar * refine;
        let exercise_steps = (0..=grid.n).map(|i| i * per_date).collect();
        BinomialModel::new(
            params.s0[0],
            params.sigma[0],
            params.r,
            params.delta[0],
            params.horizon,
            grid.n * per_date,
            exercise_steps,
        )
    }

    /// Spot at step f with `ups` up-moves.
    #[inline]
    pub fn spot(&self, f: usize, ups: usize) -> f64 {
        debug_assert!(ups <= f);
        self.s0 * self.up.powi(ups as i32) * self.down.powi((f - ups) as i32)
    }

    #[inline]
    pub fn time(&self, f: usize) -> f64 {
        f as f64 * self.dt
    }

    fn is_exercise(&self, f: usize) -> bool {
        self.exercise_steps.binary_search(&f).is_ok()
    }
}

/// Offset of tree level f in a flattened node array.
#[inline]
fn level_offset(f: usize) -> usize {
    f * (f + 1) / 2
}

/// Snell envelope of the discounted reward process on the tree. Values are
/// discounted to time 0, so martingale statements need no extra factors.
#[derive(Debug, Clone)]
pub struct SnellTable {
    pub model: BinomialModel,
    /// Discounted Snell value per node, level-major.
    pub u: Vec<f64>,
    /// Discounted continuation E[U_{f+1} | node] per non-leaf node.
    pub cont: Vec<f64>,
    /// Discounted reward per node.
    pub z: Vec<f64>,
    /// True at nodes where stopping is optimal (exercise step and Z >= cont).
    pub exercised: Vec<bool>,
}

/// Exact backward induction of max(Z, E[next | node]) over exercise steps.
pub fn snell_solve(model: &BinomialModel, payoff: &PayoffSpec) -> Result<SnellTable> {
    payoff.validate(1)?;
    let f_count = model.steps + 1;
    let nodes = level_offset(f_count);
    let mut u = vec![0.0; nodes];
    let mut cont = vec![0.0; level_offset(model.steps)];
    let mut z = vec![0.0; nodes];
    let mut exercised = vec![false; nodes];
    for f in 0..f_count {
        let df = discount_factor(model.r, model.time(f));
        for ups in 0..=f {
            z[level_offset(f) + ups] = df * payoff.evaluate(&[model.spot(f, ups)]);
        }
    }
    let last = level_offset(model.steps);
    for ups in 0..=model.steps {
        u[last + ups] = z[last + ups];
        exercised[last + ups] = true;
    }
    for f in (0..model.steps).rev() {
        let off = level_offset(f);
        let next = level_offset(f + 1);
        let ex_step = model.is_exercise(f);
        for ups in 0..=f {
            let c = model.p_up * u[next + ups + 1] + (1.0 - model.p_up) * u[next + ups];
            cont[off + ups] = c;
            if ex_step && z[off + ups] >= c {
                u[off + ups] = z[off + ups];
                exercised[off + ups] = true;
            } else {
                u[off + ups] = c;
            }
        }
    }
    Ok(SnellTable { model: model.clone(), u, cont, z, exercised })
}

impl SnellTable {
    #[inline]
    pub fn value(&self, f: usize, ups: usize) -> f64 {
        self.u[level_offset(f) + ups]
    }

    #[inline]
    pub fn continuation(&self, f: usize, ups: usize) -> f64 {
        self.cont[level_offset(f) + ups]
    }

    pub fn price(&self) -> f64 {
        self.u[0]
    }

    /// Whether stopping is optimal at node (f, ups).
    #[inline]
    pub fn is_exercised(&self, f: usize, ups: usize) -> bool {
        self.exercised[level_offset(f) + ups]
    }

    /// Doob-Meyer martingale increment over (f, f+1] given the branch taken.
    #[inline]
    pub fn dm(&self, f: usize, ups: usize, went_up: bool) -> f64 {
        let child = level_offset(f + 1) + ups + usize::from(went_up);
        self.u[child] - self.cont[level_offset(f) + ups]
    }

    /// Doob-Meyer predictable increment over (f, f+1]: U_f minus the
    /// continuation, nonzero only where stopping is optimal.
    #[inline]
    pub fn da(&self, f: usize, ups: usize) -> f64 {
        self.u[level_offset(f) + ups] - self.cont[level_offset(f) + ups]
    }

    /// Undiscounted hedge slope (V_up - V_down) / (S_up - S_down) at a
    /// non-leaf node; zero when the branches coincide (sigma = 0).
    pub fn delta(&self, f: usize, ups: usize) -> Result<f64> {
        if f >= self.model.steps {
            return Err(Error::config("delta is undefined at leaf nodes"));
        }
        let growth = 1.0 / discount_factor(self.model.r, self.model.time(f + 1));
        let next = level_offset(f + 1);
        let s_up = self.model.spot(f + 1, ups + 1);
        let s_down = self.model.spot(f + 1, ups);
        if s_up == s_down {
            return Ok(0.0);
        }
        Ok(growth * (self.u[next + ups + 1] - self.u[next + ups]) / (s_up - s_down))
    }

    /// Holding in the dividend-reinvested discounted asset that replicates
    /// the value change over (f, f+1] at a node.
    pub fn holding(&self, f: usize, ups: usize) -> Result<f64> {
        let delta = self.delta(f, ups)?;
        let t1 = self.model.time(f + 1);
        // (U_up - U_down) / (X_up - X_down) with X = e^((delta - r) t) S.
        let scale = discount_factor(self.model.r, t1) / tradable_factor(self.model.r, self.model.delta, t1);
        Ok(delta * scale)
    }

    /// Holding interpolated in spot between the two bracketing nodes of
    /// level f, clamped at the edge nodes.
    pub fn holding_at(&self, f: usize, spot: f64) -> Result<f64> {
        if f >= self.model.steps {
            return Err(Error::config("holding is undefined at leaf nodes"));
        }
        if self.model.sigma == 0.0 || f == 0 {
            return self.holding(f, 0);
        }
        let log_u = self.model.up.ln();
        // spot = s0 * u^(2 ups - f) along level f.
        let frac = ((spot / self.model.s0).ln() / log_u + f as f64) / 2.0;
        if frac <= 0.0 {
            return self.holding(f, 0);
        }
        if frac >= f as f64 {
            return self.holding(f, f);
        }
        let lo = frac.floor() as usize;
        let hi = (lo + 1).min(f);
        if lo == hi {
            return self.holding(f, lo);
        }
        let s_lo = self.model.spot(f, lo);
        let s_hi = self.model.spot(f, hi);
        let w = ((spot - s_lo) / (s_hi - s_lo)).clamp(0.0, 1.0);
        Ok((1.0 - w) * self.holding(f, lo)? + w * self.holding(f, hi)?)
    }
}

/// Exhaustively enumerated tree paths with exact probabilities.
#[derive(Debug, Clone)]
pub struct TreePaths {
    pub model: BinomialModel,
    pub q: usize,
    /// spots[q * (steps + 1) + f].
    pub spots: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Hard cap keeping exhaustive enumeration in memory (2^20 paths).
pub const MAX_ENUM_STEPS: usize = 20;

pub fn enumerate_paths(model: &BinomialModel) -> Result<TreePaths> {
    if model.steps > MAX_ENUM_STEPS {
        return Err(Error::config(format!(
            "exhaustive enumeration capped at {MAX_ENUM_STEPS} steps, got {}",
            model.steps
        )));
    }
    let q = 1usize << model.steps;
    let width = model.steps + 1;
    let mut spots = vec![0.0; q * width];
    let mut weights = vec![0.0; q];
    for bits in 0..q {
        let mut w = 1.0;
        let mut ups = 0usize;
        spots[bits * width] = model.s0;
        for f in 0..model.steps {
            let up = (bits >> f) & 1 == 1;
            if up {
                ups += 1;
                w *= model.p_up;
            } else {
                w *= 1.0 - model.p_up;
            }
            spots[bits * width + f + 1] = model.spot(f + 1, ups);
        }
        weights[bits] = w;
    }
    Ok(TreePaths { model: model.clone(), q, spots, weights })
}

impl TreePaths {
    #[inline]
    pub fn spot(&self, q: usize, f: usize) -> f64 {
        self.spots[q * (self.model.steps + 1) + f]
    }

    /// Up-moves taken by path q strictly before step f.
    #[inline]
    pub fn ups(&self, q: usize, f: usize) -> usize {
        (q & ((1usize << f) - 1)).count_ones() as usize
    }

    /// Discounted rewards at the exercise dates, shaped for the solver.
    pub fn rewards(&self, payoff: &PayoffSpec) -> Result<crate::payoff::RewardMatrix> {
        payoff.validate(1)?;
        let dates = self.model.exercise_steps.len();
        let mut z = vec![0.0; self.q * dates];
        for q in 0..self.q {
            for (n, &f) in self.model.exercise_steps.iter().enumerate() {
                let df = discount_factor(self.model.r, self.model.time(f));
                z[q * dates + n] = df * payoff.evaluate(&[self.spot(q, f)]);
            }
        }
        Ok(crate::payoff::RewardMatrix::from_raw(self.q, dates, z))
    }

    /// First exercise date (index into exercise_steps) where stopping is
    /// optimal per the solved table, per path.
    pub fn optimal_stops(&self, table: &SnellTable) -> Vec<usize> {
        (0..self.q)
            .map(|q| {
                for (n, &f) in self.model.exercise_steps.iter().enumerate() {
                    let node = level_offset(f) + self.ups(q, f);
                    if table.exercised[node] {
                        return n;
                    }
                }
                self.model.exercise_steps.len() - 1
            })
            .collect()
    }

    /// Cumulative Doob-Meyer martingale M*_n at each exercise date, per
    /// path: exact pathwise decomposition of the oracle table.
    pub fn oracle_martingale(&self, table: &SnellTable) -> Vec<f64> {
        let dates = self.model.exercise_steps.len();
        let mut m = vec![0.0; self.q * dates];
        for q in 0..self.q {
            let mut acc = 0.0;
            let mut date = 1;
            let mut ups = 0usize;
            for f in 0..self.model.steps {
                let went_up = (q >> f) & 1 == 1;
                acc += table.dm(f, ups, went_up);
                if went_up {
                    ups += 1;
                }
                if self.model.exercise_steps[date] == f + 1 {
                    m[q * dates + date] = acc;
                    date += 1;
                    if date == dates {
                        break;
                    }
                }
            }
        }
        m
    }
}

/// Solver source over enumerated tree paths: one-hot node (or grouped-node)
/// basis, the discounted asset as the single hedge instrument, exact path
/// weights. Exercise dates must tile the tree uniformly.
pub struct TreeSource<'a> {
    pub paths: &'a TreePaths,
    n: usize,
    nbar: usize,
    bins: usize,
    /// e^((delta - r) t_f) per tree step.
    xfactor: Vec<f64>,
}

impl<'a> TreeSource<'a> {
    /// `bins` of at least steps + 1 give the full node-indicator basis;
    /// fewer group neighboring nodes (still measurable, no longer complete).
    pub fn new(paths: &'a TreePaths, bins: usize) -> Result<Self> {
        let model = &paths.model;
        let n = model.exercise_steps.len() - 1;
        if n == 0 || model.exercise_steps[0] != 0 {
            return Err(Error::config("solver source needs exercise dates starting at step 0"));
        }
        let nbar = model.exercise_steps[1];
        for (i, &f) in model.exercise_steps.iter().enumerate() {
            if f != i * nbar {
                return Err(Error::config("solver source needs evenly spaced exercise dates"));
            }
        }
        if bins == 0 {
            return Err(Error::config("solver source needs at least one bin"));
        }
        let xfactor = (0..=model.steps)
            .map(|f| tradable_factor(model.r, model.delta, model.time(f)))
            .collect();
        Ok(TreeSource { paths, n, nbar, bins, xfactor })
    }

    #[inline]
    fn bin(&self, f: usize, ups: usize) -> usize {
        if self.bins >= f + 1 {
            ups
        } else {
            (ups * self.bins / (f + 1)).min(self.bins - 1)
        }
    }
}

pub struct TreeStage<'a> {
    source: &'a TreeSource<'a>,
    i: usize,
}

impl StageData for TreeStage<'_> {
    fn fill_path(&self, q: usize, s: &mut PathScratch) {
        let src = self.source;
        let base = self.i * src.nbar;
        for lf in 0..=src.nbar {
            let f = base + lf;
            s.vals[lf] = src.xfactor[f] * src.paths.spot(q, f);
        }
        for jm1 in 0..src.nbar {
            s.incr[jm1] = s.vals[jm1 + 1] - s.vals[jm1];
            s.onehot[jm1] = src.bin(base + jm1, src.paths.ups(q, base + jm1));
        }
    }
}

impl DualSource for TreeSource<'_> {
    type Stage<'s>
        = TreeStage<'s>
    where
        Self: 's;

    fn q(&self) -> usize {
        self.paths.q
    }
    fn n(&self) -> usize {
        self.n
    }
    fn nbar(&self) -> usize {
        self.nbar
    }
    fn pbar(&self) -> usize {
        self.bins
    }
    fn dbar(&self) -> usize {
        1
    }
    fn is_local(&self) -> bool {
        true
    }
    fn weights(&self) -> Option<&[f64]> {
        Some(&self.paths.weights)
    }
    fn seed(&self) -> Option<u64> {
        None
    }
    fn chunk(&self) -> usize {
        512
    }
    fn load_stage(&self, i: usize) -> Result<Self::Stage<'_>> {
        Ok(TreeStage { source: self, i })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{bs_call, norm_cdf, BsQuote};
    use crate::dual::{dual_price_out_of_sample, run_backward, AlphaTensor};

    fn put() -> PayoffSpec {
        PayoffSpec::Put { strike: 100.0 }
    }

    fn small_model(steps: usize, dates: usize) -> BinomialModel {
        let per = steps / dates;
        assert_eq!(per * dates, steps);
        BinomialModel::new(
            100.0,
            0.4,
            0.06,
            0.0,
            0.5,
            steps,
            (0..=dates).map(|i| i * per).collect(),
        )
        .unwrap()
    }

    #[test]
    fn construction_validates_inputs() {
        assert!(BinomialModel::new(100.0, 0.4, 0.06, 0.0, 0.5, 0, vec![]).is_err());
        assert!(BinomialModel::new(100.0, 0.4, 0.06, 0.0, 0.5, 4, vec![0, 2]).is_err());
        assert!(BinomialModel::new(100.0, 0.4, 0.06, 0.0, 0.5, 4, vec![2, 2, 4]).is_err());
        let m = small_model(4, 2);
        assert!(m.p_up > 0.0 && m.p_up < 1.0);
        assert!((m.up * m.down - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_payoff_prices_to_zero() {
        // A put with a tiny strike never pays on the tree's support.
        let m = small_model(6, 3);
        let t = snell_solve(&m, &PayoffSpec::Put { strike: 1e-6 }).unwrap();
        assert_eq!(t.price(), 0.0);
        assert_eq!(t.delta(0, 0).unwrap(), 0.0);
    }

    #[test]
    fn maturity_only_exercise_is_european() {
        let m =
            BinomialModel::new(100.0, 0.4, 0.06, 0.0, 0.5, 10, vec![10]).unwrap();
        let t = snell_solve(&m, &put()).unwrap();
        let paths = enumerate_paths(&m).unwrap();
        // Exact expectation of the discounted terminal payoff.
        let df = discount_factor(0.06, 0.5);
        let mut want = 0.0;
        for q in 0..paths.q {
            want += paths.weights[q] * df * (100.0 - paths.spot(q, 10)).max(0.0);
        }
        assert!((t.price() - want).abs() < 1e-12);
    }

    #[test]
    fn fine_tree_converges_to_reference_put_price() {
        let params = ModelParams {
            d: 1,
            s0: vec![100.0],
            sigma: vec![0.4],
            delta: vec![0.0],
            r: 0.06,
            rho: 0.0,
            horizon: 0.5,
        };
        let grid = TimeGrid { n: 10, nbar: 1, horizon: 0.5 };
        let coarse = BinomialModel::from_grid(&params, &grid, 50).unwrap();
        let fine = BinomialModel::from_grid(&params, &grid, 100).unwrap();
        let p500 = snell_solve(&coarse, &put()).unwrap().price();
        let p1000 = snell_solve(&fine, &put()).unwrap().price();
        assert!((p500 - 9.90).abs() < 0.02, "500-step price {p500}");
        assert!((p500 - p1000).abs() < 0.01, "resolutions disagree: {p500} vs {p1000}");
    }

    #[test]
    fn doob_meyer_identities_hold_exactly() {
        let m = small_model(12, 4);
        let t = snell_solve(&m, &put()).unwrap();
        // Conditional mean of dM vanishes node by node.
        for f in 0..m.steps {
            for ups in 0..=f {
                let mean = m.p_up * t.dm(f, ups, true) + (1.0 - m.p_up) * t.dm(f, ups, false);
                assert!(mean.abs() < 1e-12, "node ({f}, {ups}): {mean}");
                assert!(t.da(f, ups) >= -1e-15, "negative predictable increment");
            }
        }
        // Pathwise: U_f = U_0 + M_f - A_f along every enumerated path.
        let paths = enumerate_paths(&m).unwrap();
        for q in 0..paths.q {
            let (mut macc, mut aacc, mut ups) = (0.0, 0.0, 0usize);
            for f in 0..m.steps {
                let went_up = (q >> f) & 1 == 1;
                aacc += t.da(f, ups);
                macc += t.dm(f, ups, went_up);
                if went_up {
                    ups += 1;
                }
                let val = t.value(f + 1, ups);
                assert!(
                    (val - (t.price() + macc - aacc)).abs() < 1e-12,
                    "path {q} step {}",
                    f + 1
                );
            }
        }
    }

    #[test]
    fn zero_volatility_has_zero_martingale_part() {
        let m = BinomialModel::new(90.0, 0.0, 0.06, 0.0, 0.5, 6, vec![0, 3, 6]).unwrap();
        let t = snell_solve(&m, &put()).unwrap();
        for f in 0..6 {
            for ups in 0..=f {
                assert!(t.dm(f, ups, true).abs() < 1e-12);
                assert!(t.dm(f, ups, false).abs() < 1e-12);
            }
        }
        // The spot rides the forward 90 e^{rt}, so the discounted exercise
        // value e^{-rt}(100 - 90 e^{rt}) = 100 e^{-rt} - 90 decays in t:
        // immediate exercise is optimal and the price is intrinsic.
        assert!((t.price() - 10.0).abs() < 1e-12);
        assert!(t.exercised[0]);
    }

    /// The oracle martingale makes every starting date surely optimal:
    /// max_{j >= n} (Z_j - (M*_j - M*_n)) equals U_n on every path.
    #[test]
    fn oracle_martingale_is_surely_optimal() {
        let m = small_model(12, 6);
        let t = snell_solve(&m, &put()).unwrap();
        let paths = enumerate_paths(&m).unwrap();
        let rewards = paths.rewards(&put()).unwrap();
        let mstar = paths.oracle_martingale(&t);
        let dates = m.exercise_steps.len();
        for q in 0..paths.q {
            for n in 0..dates {
                let f = m.exercise_steps[n];
                let u_n = t.value(f, paths.ups(q, f));
                let best = (n..dates)
                    .map(|j| {
                        rewards.row(q)[j] - (mstar[q * dates + j] - mstar[q * dates + n])
                    })
                    .fold(f64::MIN, f64::max);
                assert!((best - u_n).abs() < 1e-10, "path {q} date {n}: {best} vs {u_n}");
            }
        }
    }

    #[test]
    fn enumeration_is_exact() {
        let m = small_model(10, 5);
        let paths = enumerate_paths(&m).unwrap();
        assert_eq!(paths.q, 1024);
        let wsum: f64 = paths.weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        // The discounted dividend-reinvested asset is an exact martingale.
        for f in [3usize, 10] {
            let xf = tradable_factor(m.r, m.delta, m.time(f));
            let mean: f64 =
                (0..paths.q).map(|q| paths.weights[q] * xf * paths.spot(q, f)).sum();
            assert!((mean - 100.0).abs() < 1e-10, "step {f}: {mean}");
        }
        // Spots agree with the recombining formula via popcount.
        for q in [0usize, 37, 1023] {
            for f in 0..=10 {
                assert_eq!(paths.spot(q, f), m.spot(f, paths.ups(q, f)));
            }
        }
    }

    #[test]
    fn tree_delta_matches_analytics_and_intrinsic_slope() {
        // European call at t = 0 vs the closed-form delta (a single-asset
        // max-call is a plain call).
        let m = BinomialModel::new(100.0, 0.4, 0.06, 0.0, 0.5, 500, vec![500]).unwrap();
        let call = PayoffSpec::MaxCall { strike: 100.0 };
        let t = snell_solve(&m, &call).unwrap();
        let q = BsQuote { t: 0.0, x: 100.0, k: 100.0, maturity: 0.5, r: 0.06, sigma: 0.4, delta: 0.0 };
        let d1 = ((q.x / q.k).ln() + (q.r + 0.5 * q.sigma * q.sigma) * 0.5) / (q.sigma * 0.5f64.sqrt());
        let want = norm_cdf(d1);
        let got = t.delta(0, 0).unwrap();
        assert!((got - want).abs() < 0.01, "tree delta {got} vs BS {want}");
        assert!((bs_call(&q) - t.price()).abs() < 0.05);
        // Deep in-the-money put with tiny volatility: slope ~ -1 after
        // undoing the discounting growth baked into the tree values.
        let m = BinomialModel::new(50.0, 0.05, 0.06, 0.0, 0.5, 200, vec![0, 100, 200]).unwrap();
        let t = snell_solve(&m, &put()).unwrap();
        let got = t.delta(0, 0).unwrap();
        assert!((got + 1.0).abs() < 0.02, "deep ITM put delta {got}");
        // Leaf nodes have no forward branch.
        assert!(t.delta(200, 0).is_err());
    }

    #[test]
    fn full_basis_solver_reproduces_the_oracle_exactly() {
        let m = small_model(12, 4);
        let table = snell_solve(&m, &put()).unwrap();
        let paths = enumerate_paths(&m).unwrap();
        let rewards = paths.rewards(&put()).unwrap();
        let source = TreeSource::new(&paths, m.steps + 1).unwrap();
        let solved = run_backward(&source, &rewards).unwrap();
        // In-sample price equals the Snell value exactly.
        assert!(
            (solved.in_sample.price - table.price()).abs() < 1e-10,
            "{} vs {}",
            solved.in_sample.price,
            table.price()
        );
        // Surely optimal: the pathwise dual maxima are constant.
        for q in 0..paths.q {
            assert!((solved.target.v[q] - table.price()).abs() < 1e-10, "path {q}");
        }
        // The fitted increments equal the Doob-Meyer increments date by date.
        let mstar = paths.oracle_martingale(&table);
        let dates = m.exercise_steps.len();
        let mut scratch = PathScratch::for_source(&source);
        for q in 0..paths.q {
            let mut macc = 0.0;
            for i in 0..source.n() {
                let stage = source.load_stage(i).unwrap();
                stage.fill_path(q, &mut scratch);
                let mut dm = 0.0;
                for jm1 in 0..source.nbar() {
                    let row = solved.alpha.stage(i, jm1);
                    dm += row[scratch.onehot[jm1]] * scratch.incr[jm1];
                }
                macc += dm;
                let want = mstar[q * dates + i + 1];
                assert!((macc - want).abs() < 1e-10, "path {q} date {}", i + 1);
            }
        }
    }

    /// Perturbing any solved coefficient strictly increases that stage's
    /// weighted square error (strict convexity of the square loss).
    #[test]
    fn solved_coefficients_are_strict_minimizers() {
        let m = small_model(6, 3);
        let table = snell_solve(&m, &put()).unwrap();
        let _ = table;
        let paths = enumerate_paths(&m).unwrap();
        let rewards = paths.rewards(&put()).unwrap();
        let source = TreeSource::new(&paths, m.steps + 1).unwrap();
        let solved = run_backward(&source, &rewards).unwrap();
        // Rebuild each stage's target from the solved recursion: V holds
        // the stage-(i+1) values, reconstructed by replay.
        let dates = m.exercise_steps.len();
        let mut v: Vec<f64> = (0..paths.q).map(|q| rewards.row(q)[dates - 1]).collect();
        let mut scratch = PathScratch::for_source(&source);
        for i in (0..source.n()).rev() {
            let stage = source.load_stage(i).unwrap();
            let sse = |alpha: &AlphaTensor| -> f64 {
                let mut acc = 0.0;
                let mut s = PathScratch::for_source(&source);
                for q in 0..paths.q {
                    stage.fill_path(q, &mut s);
                    let y = v[q] - rewards.row(q)[i];
                    for jm1 in 0..source.nbar() {
                        let row = alpha.stage(i, jm1);
                        let fit = row[s.onehot[jm1]] * s.incr[jm1];
                        acc += paths.weights[q] * (y - fit) * (y - fit);
                    }
                }
                acc
            };
            let base = sse(&solved.alpha);
            // Perturb a handful of occupied coefficients.
            for jm1 in 0..source.nbar() {
                let f = i * source.nbar() + jm1;
                for ups in [0usize, f / 2, f] {
                    let idx = ((i * solved.alpha.nbar + jm1) * solved.alpha.pbar + ups)
                        * solved.alpha.dbar;
                    let mut bumped = solved.alpha.clone();
                    bumped.a[idx] += 1e-3;
                    assert!(sse(&bumped) > base + 1e-14, "stage {i} subtick {jm1} ups {ups}");
                    let mut dropped = solved.alpha.clone();
                    dropped.a[idx] -= 1e-3;
                    assert!(sse(&dropped) > base + 1e-14);
                }
            }
            // Advance V with the solved coefficients for the next stage down.
            for q in 0..paths.q {
                stage.fill_path(q, &mut scratch);
                let mut dm = 0.0;
                for jm1 in 0..source.nbar() {
                    let row = solved.alpha.stage(i, jm1);
                    dm += row[scratch.onehot[jm1]] * scratch.incr[jm1];
                }
                v[q] = rewards.row(q)[i].max(v[q] - dm);
            }
        }
    }

    /// With a restricted (grouped-node) basis, the first solved stage still
    /// equals the exact projection of the Doob-Meyer increment onto the
    /// basis span, computed independently from the oracle table.
    #[test]
    fn last_stage_equals_projected_doob_meyer_increment() {
        let m = small_model(8, 4);
        let table = snell_solve(&m, &put()).unwrap();
        let paths = enumerate_paths(&m).unwrap();
        let rewards = paths.rewards(&put()).unwrap();
        let bins = 2;
        let source = TreeSource::new(&paths, bins).unwrap();
        let solved = run_backward(&source, &rewards).unwrap();
        let i = source.n() - 1;
        // Independent projection: weighted normal equations of dM* on the
        // grouped indicator times the increment, per subtick.
        let mut scratch = PathScratch::for_source(&source);
        let stage = source.load_stage(i).unwrap();
        for jm1 in 0..source.nbar() {
            let f = i * source.nbar() + jm1;
            let mut gram = vec![0.0; bins];
            let mut rhs = vec![0.0; bins];
            for q in 0..paths.q {
                stage.fill_path(q, &mut scratch);
                let ups = paths.ups(q, f);
                let went_up = (q >> f) & 1 == 1;
                let dmstar = table.dm(f, ups, went_up);
                let x = scratch.incr[jm1];
                let b = scratch.onehot[jm1];
                gram[b] += paths.weights[q] * x * x;
                rhs[b] += paths.weights[q] * x * dmstar;
            }
            for b in 0..bins {
                let want = if gram[b] > 0.0 { rhs[b] / gram[b] } else { 0.0 };
                let got = solved.alpha.stage(i, jm1)[b];
                assert!((got - want).abs() < 1e-10, "subtick {jm1} bin {b}: {got} vs {want}");
            }
        }
    }

    /// Any coefficient tensor gives an upper bound: exact weak duality.
    #[test]
    fn weak_duality_holds_for_arbitrary_coefficients() {
        let m = small_model(10, 5);
        let table = snell_solve(&m, &put()).unwrap();
        let paths = enumerate_paths(&m).unwrap();
        let rewards = paths.rewards(&put()).unwrap();
        let source = TreeSource::new(&paths, m.steps + 1).unwrap();
        for scale in [0.0, 0.4, 1.0, 1.7, -0.5] {
            let mut alpha = AlphaTensor::zeros(source.n(), source.nbar(), source.pbar(), 1);
            // An arbitrary deterministic pattern, scaled.
            for (idx, a) in alpha.a.iter_mut().enumerate() {
                *a = scale * (0.3 + 0.1 * ((idx % 7) as f64 - 3.0));
            }
            let est = dual_price_out_of_sample(&alpha, &source, &rewards, None).unwrap();
            assert!(
                est.price >= table.price() - 1e-12,
                "scale {scale}: {} vs {}",
                est.price,
                table.price()
            );
        }
    }
}
