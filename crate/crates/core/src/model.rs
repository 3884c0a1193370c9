//! Correlated multi-asset Black-Scholes simulation on the subtick grid.
//!
//! Spots follow dS^k = S^k ((r - delta^k) dt + sigma^k dW^k) with a common
//! pairwise correlation rho, sampled with the exact lognormal transition per
//! fine step (no discretization bias). Each path draws from its own
//! counter-based stream, so a `Regenerate` store can rebuild any interval of
//! any path from the exercise-date checkpoint and an RNG skip-ahead, bit
//! identically to the `InMemory` store.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::parallel::chunk_ranges;
use crate::rng::NormalStream;

/// Model parameters for `d` assets under a single risk-free rate.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub d: usize,
    pub s0: Vec<f64>,
    pub sigma: Vec<f64>,
    pub delta: Vec<f64>,
    pub r: f64,
    /// Common pairwise correlation; ignored for d = 1.
    pub rho: f64,
    /// Horizon in years.
    pub horizon: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("asset count d must be at least 1"));
        }
        for (name, v) in [("s0", &self.s0), ("sigma", &self.sigma), ("delta", &self.delta)] {
            if v.len() != self.d {
                return Err(Error::config(format!(
                    "{name} has {} entries, expected d = {}",
                    v.len(),
                    self.d
                )));
            }
        }
        if self.s0.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("initial spots must be strictly positive"));
        }
        if self.sigma.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::config("volatilities must be nonnegative"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::config("horizon must be positive"));
        }
        if self.d >= 2 {
            let lo = -1.0 / (self.d as f64 - 1.0);
            if !(self.rho >= lo && self.rho <= 1.0) {
                return Err(Error::config(format!(
                    "rho = {} outside the positive-semidefinite range [{lo}, 1]",
                    self.rho
                )));
            }
        }
        Ok(())
    }

    /// Lower-triangular factor L with L L^T = (1 - rho) I + rho 1 1^T,
    /// row-major d x d. Zero pivots (rho at a boundary) zero their column.
    pub fn corr_factor(&self) -> Result<Vec<f64>> {
        let d = self.d;
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let target = if i == j { 1.0 } else { self.rho };
                let mut acc = target;
                for m in 0..j {
                    acc -= l[i * d + m] * l[j * d + m];
                }
                if i == j {
                    if acc < -1e-10 {
                        return Err(Error::config(format!(
                            "correlation matrix not positive semidefinite (pivot {acc})"
                        )));
                    }
                    l[i * d + i] = acc.max(0.0).sqrt();
                } else if l[j * d + j] > 0.0 {
                    l[i * d + j] = acc / l[j * d + j];
                }
            }
        }
        Ok(l)
    }
}

/// Uniform grid of N exercise intervals split into Nbar subticks each:
/// t_{i,j} = (i Nbar + j) * horizon / (N Nbar).
#[derive(Debug, Clone, Copy)]
pub struct TimeGrid {
    pub n: usize,
    pub nbar: usize,
    pub horizon: f64,
}

impl TimeGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.nbar == 0 {
            return Err(Error::config("N and Nbar must be at least 1"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::config("horizon must be positive"));
        }
        Ok(())
    }

    /// Number of fine grid points including t = 0.
    pub fn fine_count(&self) -> usize {
        self.n * self.nbar + 1
    }

    /// Time of fine index ft.
    pub fn time(&self, ft: usize) -> f64 {
        ft as f64 * self.horizon / (self.n * self.nbar) as f64
    }

    /// Fine index of exercise date T_i.
    pub fn exercise_fine(&self, i: usize) -> usize {
        i * self.nbar
    }

    /// Fine index of subtick t_{i,j} (j in 0..=Nbar).
    pub fn subtick_fine(&self, i: usize, j: usize) -> usize {
        i * self.nbar + j
    }
}

pub fn discount_factor(r: f64, t: f64) -> f64 {
    (-r * t).exp()
}

/// Multiplier turning a raw spot into the discounted tradable value
/// S~^k_t = e^{(delta^k - r) t} S^k_t.
pub fn tradable_factor(r: f64, delta_k: f64, t: f64) -> f64 {
    ((delta_k - r) * t).exp()
}

/// Storage policy for a simulated path set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreMode {
    /// Every fine-time spot kept in memory.
    InMemory,
    /// Only exercise-date checkpoints kept; interval slabs are rebuilt from
    /// the per-path stream on demand.
    Regenerate,
}

/// Per-fine-time accumulated spot moments (used for basis calibration).
#[derive(Debug, Clone)]
pub struct MomentRow {
    /// Sum over paths of S^k.
    pub sum: Vec<f64>,
    /// Sum over paths of S^k S^l, packed upper triangle (k <= l).
    pub sum2: Vec<f64>,
}

impl MomentRow {
    fn zero(d: usize) -> Self {
        MomentRow { sum: vec![0.0; d], sum2: vec![0.0; d * (d + 1) / 2] }
    }

    fn add_spot(&mut self, s: &[f64]) {
        let d = self.sum.len();
        let mut idx = 0;
        for k in 0..d {
            self.sum[k] += s[k];
            for l in k..d {
                self.sum2[idx] += s[k] * s[l];
                idx += 1;
            }
        }
    }

    fn merge(&mut self, other: &MomentRow) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum2.iter_mut().zip(&other.sum2) {
            *a += b;
        }
    }

    /// Packed index of the (k, l) second moment, k <= l.
    pub fn pack(d: usize, k: usize, l: usize) -> usize {
        debug_assert!(k <= l && l < d);
        k * d - k * (k + 1) / 2 + l
    }
}

/// Q simulated trajectories with deterministic regeneration capability.
///
/// Layouts are path-major: checkpoints\[q * (N+1) * d + i * d + k\] and, when
/// in memory, fine\[q * fine_count * d + ft * d + k\].
pub struct PathStore {
    pub params: ModelParams,
    pub grid: TimeGrid,
    pub q: usize,
    pub seed: u64,
    pub mode: StoreMode,
    pub chunk: usize,
    corr: Vec<f64>,
    fine: Option<Vec<f64>>,
    checkpoints: Vec<f64>,
    /// Spot moments per fine time, accumulated during generation in fixed
    /// chunk order (worker-count invariant).
    pub moments: Vec<MomentRow>,
}

/// Spots of one exercise interval: rows are paths, each row holds the
/// (Nbar + 1) fine times of the interval, d spots per time.
pub enum Slab<'a> {
    Borrowed { data: &'a [f64], path_stride: usize, offset: usize, len: usize },
    Owned { data: Vec<f64>, len: usize },
}

impl<'a> Slab<'a> {
    /// Spots of path q across the interval, laid out [local_ft * d + k] with
    /// local_ft in 0..=Nbar.
    #[inline]
    pub fn path(&self, q: usize) -> &[f64] {
        match self {
            Slab::Borrowed { data, path_stride, offset, len } => {
                &data[q * path_stride + offset..q * path_stride + offset + len]
            }
            Slab::Owned { data, len } => &data[q * len..(q + 1) * len],
        }
    }
}

impl PathStore {
    /// Simulate Q paths. Moments are always accumulated; spot storage follows
    /// `mode`.
    pub fn generate(
        params: ModelParams,
        grid: TimeGrid,
        q: usize,
        seed: u64,
        mode: StoreMode,
        chunk: usize,
    ) -> Result<Self> {
        params.validate()?;
        grid.validate()?;
        if q == 0 {
            return Err(Error::config("path count Q must be positive"));
        }
        if (grid.horizon - params.horizon).abs() > 1e-12 * params.horizon {
            return Err(Error::config("grid horizon differs from model horizon"));
        }
        let corr = params.corr_factor()?;
        let d = params.d;
        let fine_count = grid.fine_count();
        let cp_stride = (grid.n + 1) * d;
        let mut checkpoints = vec![0.0; q * cp_stride];
        let mut fine = match mode {
            StoreMode::InMemory => Some(vec![0.0; q * fine_count * d]),
            StoreMode::Regenerate => None,
        };

        let stepper = Stepper::new(&params, &grid, &corr);
        let ranges = chunk_ranges(q, chunk);

        // Parallel over chunks: each chunk owns disjoint row ranges of the
        // output buffers; per-chunk moments are folded in chunk order.
        let chunk_moments: Vec<Vec<MomentRow>> = match &mut fine {
            Some(f) => checkpoints
                .par_chunks_mut(chunk * cp_stride)
                .zip(f.par_chunks_mut(chunk * fine_count * d))
                .enumerate()
                .map(|(c, (cps, fines))| {
                    let q_lo = ranges[c].0;
                    chunk_body(&stepper, &params, &grid, seed, q_lo, cps, cp_stride, Some(fines))
                })
                .collect(),
            None => checkpoints
                .par_chunks_mut(chunk * cp_stride)
                .enumerate()
                .map(|(c, cps)| {
                    let q_lo = ranges[c].0;
                    chunk_body(&stepper, &params, &grid, seed, q_lo, cps, cp_stride, None)
                })
                .collect(),
        };
        let mut moments: Vec<MomentRow> = (0..fine_count).map(|_| MomentRow::zero(d)).collect();
        for cm in &chunk_moments {
            for (m, c) in moments.iter_mut().zip(cm) {
                m.merge(c);
            }
        }

        Ok(PathStore { params, grid, q, seed, mode, chunk, corr, fine, checkpoints, moments })
    }

    /// Spots of path q at the exercise dates, laid out [i * d + k].
    #[inline]
    pub fn exercise(&self, q: usize) -> &[f64] {
        let stride = (self.grid.n + 1) * self.params.d;
        &self.checkpoints[q * stride..(q + 1) * stride]
    }

    /// Materialize the spots of exercise interval i (fine times i*Nbar ..=
    /// (i+1)*Nbar). Borrowed view for in-memory stores, regenerated otherwise.
    pub fn slab(&self, i: usize) -> Slab<'_> {
        assert!(i < self.grid.n, "interval index out of range");
        let d = self.params.d;
        let len = (self.grid.nbar + 1) * d;
        match &self.fine {
            Some(data) => Slab::Borrowed {
                data,
                path_stride: self.grid.fine_count() * d,
                offset: self.grid.exercise_fine(i) * d,
                len,
            },
            None => {
                let mut data = vec![0.0; self.q * len];
                let stepper = Stepper::new(&self.params, &self.grid, &self.corr);
                let cp_stride = (self.grid.n + 1) * d;
                let start_ft = self.grid.exercise_fine(i);
                data.par_chunks_mut(self.chunk * len)
                    .enumerate()
                    .for_each(|(c, block)| {
                        let q_lo = c * self.chunk;
                        let rows = block.len() / len;
                        let mut spot = vec![0.0; d];
                        let mut z = vec![0.0; d];
                        for row in 0..rows {
                            let path = q_lo + row;
                            let mut stream = NormalStream::for_path(self.seed, path as u64);
                            stream.skip_to((d * start_ft) as u128);
                            spot.copy_from_slice(
                                &self.checkpoints
                                    [path * cp_stride + i * d..path * cp_stride + (i + 1) * d],
                            );
                            block[row * len..row * len + d].copy_from_slice(&spot);
                            for j in 1..=self.grid.nbar {
                                stepper.step(&mut spot, &mut z, &mut stream);
                                block[row * len + j * d..row * len + (j + 1) * d]
                                    .copy_from_slice(&spot);
                            }
                        }
                    });
                Slab::Owned { data, len }
            }
        }
    }

    /// Empirical mean and covariance of the spots at fine time ft.
    pub fn moment_mean_cov(&self, ft: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.params.d;
        let row = &self.moments[ft];
        let qf = self.q as f64;
        let mean: Vec<f64> = row.sum.iter().map(|s| s / qf).collect();
        let mut cov = vec![0.0; d * (d + 1) / 2];
        let mut idx = 0;
        for k in 0..d {
            for l in k..d {
                cov[idx] = (row.sum2[idx] / qf - mean[k] * mean[l]).max(0.0);
                idx += 1;
            }
        }
        (mean, cov)
    }
}

/// One exact lognormal GBM step over dt for all assets.
struct Stepper {
    d: usize,
    drift: Vec<f64>,
    volsqdt: Vec<f64>,
    corr: Vec<f64>,
}

impl Stepper {
    fn new(params: &ModelParams, grid: &TimeGrid, corr: &[f64]) -> Self {
        let dt = grid.horizon / (grid.n * grid.nbar) as f64;
        let d = params.d;
        Stepper {
            d,
            drift: (0..d)
                .map(|k| (params.r - params.delta[k] - 0.5 * params.sigma[k] * params.sigma[k]) * dt)
                .collect(),
            volsqdt: (0..d).map(|k| params.sigma[k] * dt.sqrt()).collect(),
            corr: corr.to_vec(),
        }
    }

    #[inline]
    fn step(&self, spot: &mut [f64], z: &mut [f64], stream: &mut NormalStream) {
        let d = self.d;
        for zk in z.iter_mut() {
            *zk = stream.next_normal();
        }
        for k in 0..d {
            let mut g = 0.0;
            for m in 0..=k {
                g += self.corr[k * d + m] * z[m];
            }
            spot[k] *= (self.drift[k] + self.volsqdt[k] * g).exp();
        }
    }
}

/// Per-chunk generation body: steps every path of the chunk across the fine
/// grid, filling checkpoints (and the fine store when present) and
/// accumulating the chunk's moment rows.
#[allow(clippy::too_many_arguments)]
fn chunk_body(
    stepper: &Stepper,
    params: &ModelParams,
    grid: &TimeGrid,
    seed: u64,
    q_lo: usize,
    cps: &mut [f64],
    cp_stride: usize,
    mut fines: Option<&mut [f64]>,
) -> Vec<MomentRow> {
    let d = params.d;
    let fine_count = grid.fine_count();
    let fine_stride = fine_count * d;
    let rows = cps.len() / cp_stride;
    let mut moments: Vec<MomentRow> = (0..fine_count).map(|_| MomentRow::zero(d)).collect();
    let mut spot = vec![0.0; d];
    let mut z = vec![0.0; d];
    for row in 0..rows {
        let path = q_lo + row;
        let mut stream = NormalStream::for_path(seed, path as u64);
        spot.copy_from_slice(&params.s0);
        moments[0].add_spot(&spot);
        cps[row * cp_stride..row * cp_stride + d].copy_from_slice(&spot);
        if let Some(f) = fines.as_deref_mut() {
            f[row * fine_stride..row * fine_stride + d].copy_from_slice(&spot);
        }
        for ft in 1..fine_count {
            stepper.step(&mut spot, &mut z, &mut stream);
            moments[ft].add_spot(&spot);
            if ft % grid.nbar == 0 {
                let i = ft / grid.nbar;
                cps[row * cp_stride + i * d..row * cp_stride + (i + 1) * d]
                    .copy_from_slice(&spot);
            }
            if let Some(f) = fines.as_deref_mut() {
                f[row * fine_stride + ft * d..row * fine_stride + (ft + 1) * d]
                    .copy_from_slice(&spot);
            }
        }
    }
    moments
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::with_workers;

    fn put_params() -> ModelParams {
        ModelParams {
            d: 1,
            s0: vec![100.0],
            sigma: vec![0.4],
            delta: vec![0.0],
            r: 0.06,
            rho: 0.0,
            horizon: 0.5,
        }
    }

    fn grid(n: usize, nbar: usize, horizon: f64) -> TimeGrid {
        TimeGrid { n, nbar, horizon }
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut p = put_params();
        p.s0 = vec![-1.0];
        assert!(p.validate().is_err());
        let mut p = put_params();
        p.d = 2;
        p.s0 = vec![100.0, 100.0];
        p.sigma = vec![0.2, 0.2];
        p.delta = vec![0.0, 0.0];
        p.rho = -1.5;
        assert!(p.validate().is_err());
        p.rho = 0.5;
        assert!(p.validate().is_ok());
        // d = 2 admits rho down to -1; d = 3 only down to -1/2.
        p.rho = -0.9;
        assert!(p.validate().is_ok());
        p.d = 3;
        p.s0 = vec![100.0; 3];
        p.sigma = vec![0.2; 3];
        p.delta = vec![0.0; 3];
        assert!(p.validate().is_err(), "rho below -1/(d-1) must be rejected");
        p.rho = -0.3;
        assert!(p.validate().is_ok());
        assert!(
            PathStore::generate(put_params(), grid(2, 1, 0.5), 0, 1, StoreMode::InMemory, 64)
                .is_err(),
            "Q = 0 must be rejected"
        );
    }

    #[test]
    fn corr_factor_reproduces_matrix() {
        let p = ModelParams {
            d: 3,
            s0: vec![1.0; 3],
            sigma: vec![0.2; 3],
            delta: vec![0.0; 3],
            r: 0.0,
            rho: 0.3,
            horizon: 1.0,
        };
        let l = p.corr_factor().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut got = 0.0;
                for m in 0..3 {
                    got += l[i * 3 + m] * l[j * 3 + m];
                }
                let want = if i == j { 1.0 } else { 0.3 };
                assert!((got - want).abs() < 1e-12, "({i},{j}): {got} vs {want}");
            }
        }
        // Boundary rho = 1 is PSD (rank one) and must factor.
        let mut p1 = p.clone();
        p1.rho = 1.0;
        let l = p1.corr_factor().unwrap();
        for i in 0..3 {
            let mut got = 0.0;
            for m in 0..3 {
                got += l[i * 3 + m] * l[i * 3 + m];
            }
            assert!((got - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_vol_paths_follow_the_deterministic_drift() {
        let mut p = put_params();
        p.sigma = vec![0.0];
        let g = grid(5, 2, 0.5);
        let store = PathStore::generate(p, g, 4, 7, StoreMode::InMemory, 2).unwrap();
        for q in 0..4 {
            let cp = store.exercise(q);
            for i in 0..=5 {
                let t = g.time(g.exercise_fine(i));
                let want = 100.0 * (0.06 * t).exp();
                assert!((cp[i] - want).abs() < 1e-10 * want, "date {i}: {} vs {want}", cp[i]);
            }
        }
    }

    #[test]
    fn initial_spots_equal_s0_everywhere() {
        let store =
            PathStore::generate(put_params(), grid(3, 2, 0.5), 50, 11, StoreMode::Regenerate, 16)
                .unwrap();
        for q in 0..50 {
            assert_eq!(store.exercise(q)[0], 100.0);
        }
        let slab = store.slab(0);
        for q in 0..50 {
            assert_eq!(slab.path(q)[0], 100.0);
        }
    }

    #[test]
    fn discounted_tradables_are_martingales() {
        let p = put_params();
        let g = grid(10, 1, 0.5);
        let store = PathStore::generate(p.clone(), g, 100_000, 42, StoreMode::InMemory, 16_384)
            .unwrap();
        for i in 1..=10 {
            let t = g.time(g.exercise_fine(i));
            let fac = tradable_factor(p.r, p.delta[0], t);
            let (mut sum, mut sum2) = (0.0, 0.0);
            for q in 0..store.q {
                let v = fac * store.exercise(q)[i];
                sum += v;
                sum2 += v * v;
            }
            let n = store.q as f64;
            let mean = sum / n;
            let se = ((sum2 / n - mean * mean) / n).sqrt();
            assert!(
                (mean - 100.0).abs() < 4.0 * se,
                "date {i}: mean {mean}, se {se}"
            );
        }
    }

    #[test]
    fn one_step_log_return_correlation_matches_rho() {
        let p = ModelParams {
            d: 2,
            s0: vec![100.0, 90.0],
            sigma: vec![0.3, 0.5],
            delta: vec![0.0, 0.1],
            r: 0.05,
            rho: 0.3,
            horizon: 1.0,
        };
        let store =
            PathStore::generate(p, grid(1, 1, 1.0), 1_000_000, 5, StoreMode::InMemory, 65_536)
                .unwrap();
        let (mut s1, mut s2, mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for q in 0..store.q {
            let cp = store.exercise(q);
            let r1 = (cp[2] / cp[0]).ln();
            let r2 = (cp[3] / cp[1]).ln();
            s1 += r1;
            s2 += r2;
            s11 += r1 * r1;
            s22 += r2 * r2;
            s12 += r1 * r2;
        }
        let n = store.q as f64;
        let (m1, m2) = (s1 / n, s2 / n);
        let corr =
            (s12 / n - m1 * m2) / ((s11 / n - m1 * m1).sqrt() * (s22 / n - m2 * m2).sqrt());
        assert!((corr - 0.3).abs() < 0.01, "empirical correlation {corr}");
    }

    #[test]
    fn providers_agree_bit_for_bit() {
        let p = ModelParams {
            d: 2,
            s0: vec![100.0, 95.0],
            sigma: vec![0.4, 0.2],
            delta: vec![0.01, 0.0],
            r: 0.06,
            rho: 0.5,
            horizon: 0.5,
        };
        let g = grid(4, 3, 0.5);
        let mem = PathStore::generate(p.clone(), g, 200, 9, StoreMode::InMemory, 32).unwrap();
        let regen = PathStore::generate(p, g, 200, 9, StoreMode::Regenerate, 32).unwrap();
        assert_eq!(mem.checkpoints, regen.checkpoints);
        for i in 0..4 {
            let sm = mem.slab(i);
            let sr = regen.slab(i);
            for q in 0..200 {
                assert_eq!(sm.path(q), sr.path(q), "interval {i}, path {q}");
            }
        }
        for (a, b) in mem.moments.iter().zip(&regen.moments) {
            assert_eq!(a.sum, b.sum);
            assert_eq!(a.sum2, b.sum2);
        }
    }

    #[test]
    fn slab_endpoints_match_checkpoints() {
        let store =
            PathStore::generate(put_params(), grid(4, 5, 0.5), 64, 3, StoreMode::Regenerate, 16)
                .unwrap();
        for i in 0..4 {
            let slab = store.slab(i);
            for q in 0..64 {
                let p = slab.path(q);
                assert_eq!(p.len(), 6);
                assert_eq!(p[0], store.exercise(q)[i]);
                assert_eq!(p[5], store.exercise(q)[i + 1]);
            }
        }
    }

    #[test]
    fn generation_is_worker_count_invariant() {
        let gen = |workers| {
            with_workers(workers, || {
                PathStore::generate(put_params(), grid(5, 2, 0.5), 1_000, 77, StoreMode::InMemory, 64)
                    .unwrap()
            })
        };
        let a = gen(1);
        let b = gen(4);
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.fine, b.fine);
        for (x, y) in a.moments.iter().zip(&b.moments) {
            assert_eq!(x.sum, y.sum);
            assert_eq!(x.sum2, y.sum2);
        }
    }

    #[test]
    fn moments_match_gbm_expectations() {
        let p = put_params();
        let g = grid(2, 1, 0.5);
        let store =
            PathStore::generate(p.clone(), g, 200_000, 13, StoreMode::Regenerate, 16_384).unwrap();
        let (mean, cov) = store.moment_mean_cov(g.exercise_fine(2));
        let want = 100.0 * (p.r * 0.5f64).exp();
        let se = (cov[0] / store.q as f64).sqrt();
        assert!((mean[0] - want).abs() < 3.0 * se, "mean {} vs {want}", mean[0]);
        let want_var =
            want * want * ((p.sigma[0] * p.sigma[0] * 0.5f64).exp_m1());
        assert!(
            (cov[0] - want_var).abs() < 0.05 * want_var,
            "var {} vs {want_var}",
            cov[0]
        );
    }
}
