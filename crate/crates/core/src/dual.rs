//! Backward least-squares construction of an approximating hedge martingale
//! and the dual price estimators built on it.
//!
//! Working backward over exercise intervals, each stage regresses the
//! running pathwise dual target against basis-weighted instrument
//! increments, one decoupled normal-equation system per subtick, then
//! absorbs the fitted martingale increment into the target:
//! V <- max(Z_i, V - dM). The stage-0 target is the pathwise maximum
//! max_{0<=m<=N} (Z_m - M_m) including immediate exercise, whose mean is
//! the in-sample dual price; replaying frozen coefficients on fresh paths
//! gives the out-of-sample price, an upward-biased estimate of the true
//! value.

use crate::basis::{BasisEvaluator, BasisOut};
use crate::error::{Error, Result};
use crate::instruments::InstrumentEvaluator;
use crate::model::PathStore;
use crate::parallel::par_chunk_reduce;
use crate::payoff::RewardMatrix;
use rayon::prelude::*;

/// Ridge shift scale, relative to trace(G)/dim, applied when the plain
/// factorization of a Gram block fails.
pub const RIDGE_SCALE: f64 = 1e-10;
/// A Cholesky pivot at or below this fraction of trace(G)/dim counts as a
/// failed (near-singular) factorization.
pub const PIVOT_TOL: f64 = 1e-12;

/// Regression coefficients for every (interval, subtick, basis, instrument).
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaTensor {
    pub n: usize,
    pub nbar: usize,
    pub pbar: usize,
    pub dbar: usize,
    /// a[((i * nbar + (j-1)) * pbar + p) * dbar + c].
    pub a: Vec<f64>,
}

impl AlphaTensor {
    pub fn zeros(n: usize, nbar: usize, pbar: usize, dbar: usize) -> Self {
        AlphaTensor { n, nbar, pbar, dbar, a: vec![0.0; n * nbar * pbar * dbar] }
    }

    /// Coefficient block for interval i, subtick offset jm1 = j - 1: a
    /// pbar x dbar slice.
    #[inline]
    pub fn stage(&self, i: usize, jm1: usize) -> &[f64] {
        let w = self.pbar * self.dbar;
        let base = (i * self.nbar + jm1) * w;
        &self.a[base..base + w]
    }

    fn stage_mut(&mut self, i: usize, jm1: usize) -> &mut [f64] {
        let w = self.pbar * self.dbar;
        let base = (i * self.nbar + jm1) * w;
        &mut self.a[base..base + w]
    }
}

/// Per-path value max_{m >= stage} (Z_m - sum of later dM) maintained by the
/// backward recursion; at stage 0 it holds the pathwise dual maxima.
#[derive(Debug, Clone)]
pub struct DualTarget {
    pub v: Vec<f64>,
}

/// Price plus Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualEstimate {
    pub price: f64,
    pub se: f64,
}

/// Weighted mean and standard error of a per-path sample.
pub fn weighted_price(vals: &[f64], weights: Option<&[f64]>) -> DualEstimate {
    let q = vals.len();
    match weights {
        None => {
            let mean = vals.iter().sum::<f64>() / q as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / q as f64;
            DualEstimate { price: mean, se: (var / q as f64).sqrt() }
        }
        Some(w) => {
            let wsum: f64 = w.iter().sum();
            let mean = vals.iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / wsum;
            let var =
                vals.iter().zip(w).map(|(v, w)| w * (v - mean) * (v - mean)).sum::<f64>() / wsum;
            DualEstimate { price: mean, se: (var / q as f64).sqrt() }
        }
    }
}

/// Reusable per-path buffers a stage fills for one path.
pub struct PathScratch {
    /// Instrument values at local subticks 0..=nbar: vals[lf * dbar + c].
    pub vals: Vec<f64>,
    /// Instrument increments over (j-1, j]: incr[(j-1) * dbar + c].
    pub incr: Vec<f64>,
    /// Active bin per regression subtick (local bases).
    pub onehot: Vec<usize>,
    /// Dense activations per regression subtick (polynomial bases).
    pub dense: Vec<f64>,
    pub local: bool,
}

impl PathScratch {
    pub fn for_source<S: DualSource + ?Sized>(source: &S) -> Self {
        let (nbar, pbar, dbar) = (source.nbar(), source.pbar(), source.dbar());
        PathScratch {
            vals: vec![0.0; (nbar + 1) * dbar],
            incr: vec![0.0; nbar * dbar],
            onehot: vec![0; nbar],
            dense: if source.is_local() { vec![] } else { vec![0.0; nbar * pbar] },
            local: source.is_local(),
        }
    }
}

/// One loaded exercise interval: can replay activation and increment data
/// for any path.
pub trait StageData: Sync {
    fn fill_path(&self, q: usize, s: &mut PathScratch);
}

/// A source of per-interval regression data: simulated paths or an
/// exhaustively enumerated lattice.
pub trait DualSource: Sync {
    type Stage<'s>: StageData
    where
        Self: 's;

    fn q(&self) -> usize;
    /// Exercise intervals (dates are 0..=n).
    fn n(&self) -> usize;
    fn nbar(&self) -> usize;
    fn pbar(&self) -> usize;
    fn dbar(&self) -> usize;
    fn is_local(&self) -> bool;
    /// Exact path weights (lattice sources); None means equal weights.
    fn weights(&self) -> Option<&[f64]>;
    /// RNG seed behind the paths, if any; used to reject seed collisions.
    fn seed(&self) -> Option<u64>;
    fn chunk(&self) -> usize;
    fn load_stage(&self, i: usize) -> Result<Self::Stage<'_>>;
}

/// Simulated-path source: spots from a PathStore, hedge increments from an
/// instrument evaluator, activations from a frozen basis mapping.
pub struct GbmSource<'a> {
    pub store: &'a PathStore,
    pub instruments: &'a InstrumentEvaluator,
    pub basis: &'a BasisEvaluator,
}

impl<'a> GbmSource<'a> {
    pub fn new(
        store: &'a PathStore,
        instruments: &'a InstrumentEvaluator,
        basis: &'a BasisEvaluator,
    ) -> Self {
        GbmSource { store, instruments, basis }
    }
}

pub struct GbmStage<'a> {
    slab: crate::model::Slab<'a>,
    instruments: &'a InstrumentEvaluator,
    basis: &'a BasisEvaluator,
    base_ft: usize,
    d: usize,
    nbar: usize,
    dbar: usize,
    pbar: usize,
}

impl StageData for GbmStage<'_> {
    #[inline]
    fn fill_path(&self, q: usize, s: &mut PathScratch) {
        let path = self.slab.path(q);
        let (d, dbar, pbar) = (self.d, self.dbar, self.pbar);
        for lf in 0..=self.nbar {
            self.instruments.eval(
                self.base_ft + lf,
                &path[lf * d..(lf + 1) * d],
                &mut s.vals[lf * dbar..(lf + 1) * dbar],
            );
        }
        for jm1 in 0..self.nbar {
            for c in 0..dbar {
                s.incr[jm1 * dbar + c] = s.vals[(jm1 + 1) * dbar + c] - s.vals[jm1 * dbar + c];
            }
            let dense = if s.local {
                &mut [][..]
            } else {
                &mut s.dense[jm1 * pbar..(jm1 + 1) * pbar]
            };
            match self.basis.eval(self.base_ft + jm1, &path[jm1 * d..(jm1 + 1) * d], dense) {
                BasisOut::OneHot(bin) => s.onehot[jm1] = bin,
                BasisOut::Dense => {}
            }
        }
    }
}

impl DualSource for GbmSource<'_> {
    type Stage<'s>
        = GbmStage<'s>
    where
        Self: 's;

    fn q(&self) -> usize {
        self.store.q
    }
    fn n(&self) -> usize {
        self.store.grid.n
    }
    fn nbar(&self) -> usize {
        self.store.grid.nbar
    }
    fn pbar(&self) -> usize {
        self.basis.pbar
    }
    fn dbar(&self) -> usize {
        self.instruments.dbar()
    }
    fn is_local(&self) -> bool {
        self.basis.spec.is_local()
    }
    fn weights(&self) -> Option<&[f64]> {
        None
    }
    fn seed(&self) -> Option<u64> {
        Some(self.store.seed)
    }
    fn chunk(&self) -> usize {
        self.store.chunk
    }

    fn load_stage(&self, i: usize) -> Result<Self::Stage<'_>> {
        Ok(GbmStage {
            slab: self.store.slab(i),
            instruments: self.instruments,
            basis: self.basis,
            base_ft: self.store.grid.exercise_fine(i),
            d: self.store.params.d,
            nbar: self.store.grid.nbar,
            dbar: self.instruments.dbar(),
            pbar: self.basis.pbar,
        })
    }
}

/// How a Gram block was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveOutcome {
    Plain,
    Ridged,
    Zeroed,
}

/// Solve G x = b for a symmetric PSD Gram block given as a packed upper
/// triangle. Plain Cholesky first; on a failed or near-singular pivot,
/// retry once with the ridge shift; still failing, zero the coefficients.
pub fn solve_ridge(packed: &[f64], rhs: &[f64], dim: usize, out: &mut [f64]) -> SolveOutcome {
    debug_assert_eq!(packed.len(), dim * (dim + 1) / 2);
    let mut trace = 0.0;
    for r in 0..dim {
        trace += packed[tri_index(r, r, dim)];
    }
    if !(trace > 0.0) {
        out.fill(0.0);
        return SolveOutcome::Zeroed;
    }
    let pivot_floor = PIVOT_TOL * trace / dim as f64;
    let mut full = vec![0.0; dim * dim];
    let unpack = |full: &mut Vec<f64>, shift: f64| {
        for r in 0..dim {
            for c in r..dim {
                let v = packed[tri_index(r, c, dim)];
                full[r * dim + c] = v;
                full[c * dim + r] = v;
            }
            full[r * dim + r] += shift;
        }
    };
    unpack(&mut full, 0.0);
    if cholesky_solve(&mut full, rhs, dim, pivot_floor, out) {
        return SolveOutcome::Plain;
    }
    unpack(&mut full, RIDGE_SCALE * trace / dim as f64);
    if cholesky_solve(&mut full, rhs, dim, pivot_floor, out) {
        return SolveOutcome::Ridged;
    }
    out.fill(0.0);
    SolveOutcome::Zeroed
}

/// Index into a packed upper triangle stored row-major.
#[inline]
pub fn tri_index(r: usize, c: usize, dim: usize) -> usize {
    debug_assert!(r <= c && c < dim);
    r * (2 * dim + 1 - r) / 2 + (c - r)
}

/// In-place lower Cholesky of `full` (row-major, overwritten) and solve.
/// Returns false when a pivot drops to or below `pivot_floor`.
fn cholesky_solve(full: &mut [f64], rhs: &[f64], dim: usize, pivot_floor: f64, out: &mut [f64]) -> bool {
    for j in 0..dim {
        let mut diag = full[j * dim + j];
        for k in 0..j {
            diag -= full[j * dim + k] * full[j * dim + k];
        }
        if !(diag > pivot_floor) {
            return false;
        }
        let diag = diag.sqrt();
        full[j * dim + j] = diag;
        for r in (j + 1)..dim {
            let mut v = full[r * dim + j];
            for k in 0..j {
                v -= full[r * dim + k] * full[j * dim + k];
            }
            full[r * dim + j] = v / diag;
        }
    }
    // Forward substitution L y = rhs, then back substitution L^T x = y.
    for r in 0..dim {
        let mut v = rhs[r];
        for k in 0..r {
            v -= full[r * dim + k] * out[k];
        }
        out[r] = v / full[r * dim + r];
    }
    for r in (0..dim).rev() {
        let mut v = out[r];
        for k in (r + 1)..dim {
            v -= full[k * dim + r] * out[k];
        }
        out[r] = v / full[r * dim + r];
    }
    true
}

/// dM over one interval for a filled scratch: sum over subticks of the
/// activated coefficients dotted with the instrument increments.
#[inline]
pub(crate) fn increment_dm(alpha: &AlphaTensor, i: usize, s: &PathScratch) -> f64 {
    let (nbar, pbar, dbar) = (alpha.nbar, alpha.pbar, alpha.dbar);
    let mut dm = 0.0;
    for jm1 in 0..nbar {
        let coeff = alpha.stage(i, jm1);
        let x = &s.incr[jm1 * dbar..(jm1 + 1) * dbar];
        if s.local {
            let row = &coeff[s.onehot[jm1] * dbar..(s.onehot[jm1] + 1) * dbar];
            for c in 0..dbar {
                dm += row[c] * x[c];
            }
        } else {
            let act = &s.dense[jm1 * pbar..(jm1 + 1) * pbar];
            for p in 0..pbar {
                let b = act[p];
                if b != 0.0 {
                    let row = &coeff[p * dbar..(p + 1) * dbar];
                    for c in 0..dbar {
                        dm += b * row[c] * x[c];
                    }
                }
            }
        }
    }
    dm
}

/// Result of the backward recursion: coefficients, the stage-0 target, and
/// the in-sample dual price.
pub struct SolvedDual {
    pub alpha: AlphaTensor,
    pub target: DualTarget,
    pub in_sample: DualEstimate,
}

fn check_shapes<S: DualSource>(source: &S, rewards: &RewardMatrix) -> Result<()> {
    if rewards.q != source.q() {
        return Err(Error::config(format!(
            "reward matrix holds {} paths but the source has {}",
            rewards.q,
            source.q()
        )));
    }
    if rewards.dates != source.n() + 1 {
        return Err(Error::config(format!(
            "reward matrix holds {} dates but the source has {} intervals",
            rewards.dates,
            source.n()
        )));
    }
    Ok(())
}

/// Run the backward recursion, filling the coefficient tensor and reducing
/// the dual target to stage 0.
pub fn run_backward<S: DualSource>(source: &S, rewards: &RewardMatrix) -> Result<SolvedDual> {
    check_shapes(source, rewards)?;
    let (q, n, nbar, pbar, dbar) = (source.q(), source.n(), source.nbar(), source.pbar(), source.dbar());
    let local = source.is_local();
    let chunk = source.chunk();
    let weights = source.weights();
    if let Some(w) = weights {
        if w.len() != q {
            return Err(Error::config("weight vector length mismatch"));
        }
    }
    let mut alpha = AlphaTensor::zeros(n, nbar, pbar, dbar);
    // Initialize the target with the terminal rewards.
    let mut v: Vec<f64> = (0..q).map(|p| rewards.row(p)[n]).collect();

    let tri = dbar * (dbar + 1) / 2;
    // Per-(subtick, bin) accumulator block: Gram triangle, RHS, visit count.
    let bin_stride = tri + dbar + 1;
    let dense_dim = pbar * dbar;
    let dense_tri = dense_dim * (dense_dim + 1) / 2;
    // Per-subtick accumulator: all bins (local) or one big system (dense).
    let subtick_stride = if local { pbar * bin_stride } else { dense_tri + dense_dim + 1 };

    for i in (0..n).rev() {
        let stage = source.load_stage(i)?;
        // Pass A: accumulate normal equations for every subtick of the
        // interval, chunked over paths, folded in chunk order.
        let v_ref = &v;
        let acc = par_chunk_reduce(
            q,
            chunk,
            |lo, hi| {
                let mut acc = vec![0.0f64; nbar * subtick_stride];
                let mut s = PathScratch::for_source(source);
                for path in lo..hi {
                    stage.fill_path(path, &mut s);
                    let w = weights.map_or(1.0, |w| w[path]);
                    let y = v_ref[path] - rewards.row(path)[i];
                    for jm1 in 0..nbar {
                        let x = &s.incr[jm1 * dbar..(jm1 + 1) * dbar];
                        if local {
                            let base =
                                jm1 * subtick_stride + s.onehot[jm1] * bin_stride;
                            let (gram, rest) = acc[base..base + bin_stride].split_at_mut(tri);
                            let (rhs, count) = rest.split_at_mut(dbar);
                            let mut t = 0;
                            for r in 0..dbar {
                                for c in r..dbar {
                                    gram[t] += w * x[r] * x[c];
                                    t += 1;
                                }
                            }
                            for r in 0..dbar {
                                rhs[r] += w * y * x[r];
                            }
                            count[0] += 1.0;
                        } else {
                            let act = &s.dense[jm1 * pbar..(jm1 + 1) * pbar];
                            let base = jm1 * subtick_stride;
                            let (gram, rest) =
                                acc[base..base + subtick_stride].split_at_mut(dense_tri);
                            let (rhs, count) = rest.split_at_mut(dense_dim);
                            // Feature vector f[p * dbar + c] = act_p * x_c.
                            let mut f = vec![0.0; dense_dim];
                            for p in 0..pbar {
                                for c in 0..dbar {
                                    f[p * dbar + c] = act[p] * x[c];
                                }
                            }
                            let mut t = 0;
                            for r in 0..dense_dim {
                                let wfr = w * f[r];
                                for c in r..dense_dim {
                                    gram[t] += wfr * f[c];
                                    t += 1;
                                }
                            }
                            for r in 0..dense_dim {
                                rhs[r] += w * y * f[r];
                            }
                            count[0] += 1.0;
                        }
                    }
                }
                acc
            },
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                a
            },
        )
        .ok_or_else(|| Error::config("no paths"))?;

        // Solve the decoupled systems and write this interval's coefficients.
        for jm1 in 0..nbar {
            let coeff = alpha.stage_mut(i, jm1);
            let sub = &acc[jm1 * subtick_stride..(jm1 + 1) * subtick_stride];
            if local {
                for p in 0..pbar {
                    let blk = &sub[p * bin_stride..(p + 1) * bin_stride];
                    let out = &mut coeff[p * dbar..(p + 1) * dbar];
                    if blk[tri + dbar] < (dbar + 1) as f64 {
                        out.fill(0.0);
                    } else {
                        solve_ridge(&blk[..tri], &blk[tri..tri + dbar], dbar, out);
                    }
                }
            } else if sub[dense_tri + dense_dim] < (dense_dim + 1) as f64 {
                coeff.fill(0.0);
            } else {
                solve_ridge(&sub[..dense_tri], &sub[dense_tri..dense_tri + dense_dim], dense_dim, coeff);
            }
        }

        // Pass B: absorb the fitted increment, V <- max(Z_i, V - dM).
        let alpha_ref = &alpha;
        let stage_ref = &stage;
        v.par_chunks_mut(chunk).enumerate().for_each(|(ci, vchunk)| {
            let lo = ci * chunk;
            let mut s = PathScratch::for_source(source);
            for (off, vq) in vchunk.iter_mut().enumerate() {
                let path = lo + off;
                stage_ref.fill_path(path, &mut s);
                let dm = increment_dm(alpha_ref, i, &s);
                let z = rewards.row(path)[i];
                *vq = z.max(*vq - dm);
            }
        });
    }

    let in_sample = weighted_price(&v, weights);
    Ok(SolvedDual { alpha, target: DualTarget { v }, in_sample })
}

/// In-sample dual price: mean and standard error of the stage-0 target.
pub fn dual_price_in_sample(target: &DualTarget, weights: Option<&[f64]>) -> DualEstimate {
    weighted_price(&target.v, weights)
}

/// Replay frozen coefficients over a source, returning the per-path
/// pathwise maxima max_{0<=m<=N} (Z_m - M_m).
pub fn forward_maxima<S: DualSource>(
    alpha: &AlphaTensor,
    source: &S,
    rewards: &RewardMatrix,
) -> Result<Vec<f64>> {
    check_shapes(source, rewards)?;
    if alpha.n != source.n()
        || alpha.nbar != source.nbar()
        || alpha.pbar != source.pbar()
        || alpha.dbar != source.dbar()
    {
        return Err(Error::config("coefficient tensor shape does not match the source"));
    }
    let q = source.q();
    let chunk = source.chunk();
    // Running martingale and running best per path.
    let mut m = vec![0.0f64; q];
    let mut best: Vec<f64> = (0..q).map(|p| rewards.row(p)[0]).collect();
    for i in 0..source.n() {
        let stage = source.load_stage(i)?;
        let stage_ref = &stage;
        m.par_chunks_mut(chunk)
            .zip(best.par_chunks_mut(chunk))
            .enumerate()
            .for_each(|(ci, (mc, bc))| {
                let lo = ci * chunk;
                let mut s = PathScratch::for_source(source);
                for (off, (mq, bq)) in mc.iter_mut().zip(bc.iter_mut()).enumerate() {
                    let path = lo + off;
                    stage_ref.fill_path(path, &mut s);
                    *mq += increment_dm(alpha, i, &s);
                    let z = rewards.row(path)[i + 1];
                    *bq = bq.max(z - *mq);
                }
            });
    }
    Ok(best)
}

/// Out-of-sample dual price on fresh paths with frozen coefficients and
/// mappings. Rejects evaluation on the training seed.
pub fn dual_price_out_of_sample<S: DualSource>(
    alpha: &AlphaTensor,
    source: &S,
    rewards: &RewardMatrix,
    train_seed: Option<u64>,
) -> Result<DualEstimate> {
    if let (Some(fresh), Some(train)) = (source.seed(), train_seed) {
        if fresh == train {
            return Err(Error::config(format!(
                "out-of-sample paths reuse the training seed {train}; pick a fresh seed"
            )));
        }
    }
    let best = forward_maxima(alpha, source, rewards)?;
    Ok(weighted_price(&best, source.weights()))
}
