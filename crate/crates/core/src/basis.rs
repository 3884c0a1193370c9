//! Regression bases: local hypercube indicators, local signed-payoff
//! indicators, and polynomial monomials of affinely mapped spots.
//!
//! Local families first map the state through a calibrated CDF so bins are
//! roughly equiprobable, then activate exactly one of the Pbar indicator
//! functions. The polynomial family maps each spot into a 4-standard-
//! deviation log range and returns all monomials of total degree <= eta.
//! Mapping parameters are frozen at calibration on the training set and
//! reused verbatim out of sample.

use crate::analytics::{lognormal_cdf_from_moments, norm_cdf};
use crate::error::{Error, Result};
use crate::model::{ModelParams, MomentRow, PathStore, TimeGrid};
use crate::payoff::PayoffSpec;

/// Basis family and size parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BasisSpec {
    /// Indicators of the P^d hypercubes of per-asset CDF-mapped spots.
    LocalHypercube { p: usize },
    /// Indicators of P intervals of the CDF-mapped signed payoff K - basket.
    LocalSignedPayoff { p: usize },
    /// Monomials of total degree <= eta in the affinely mapped spots.
    Polynomial { eta: usize },
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BasisSpec::LocalHypercube { p } | BasisSpec::LocalSignedPayoff { p } => {
                if *p == 0 {
                    return Err(Error::config("basis needs P >= 1"));
                }
            }
            BasisSpec::Polynomial { .. } => {}
        }
        Ok(())
    }

    /// Number of basis functions for dimension d.
    pub fn pbar(&self, d: usize) -> usize {
        match self {
            BasisSpec::LocalHypercube { p } => p.pow(d as u32),
            BasisSpec::LocalSignedPayoff { p } => *p,
            BasisSpec::Polynomial { eta } => binomial(d + eta, *eta),
        }
    }

    /// Local families produce one-hot activations.
    pub fn is_local(&self) -> bool {
        !matches!(self, BasisSpec::Polynomial { .. })
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u64 / (i + 1) as u64;
    }
    acc as usize
}

/// Where calibration moments come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentStyle {
    /// Sample moments of the training paths (the default).
    Empirical,
    /// Exact lognormal moments of the model.
    ClosedForm,
}

/// Frozen per-fine-time mapping parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum StateMapping {
    /// rows[ft * 2d + 2k] = mean, rows[ft * 2d + 2k + 1] = variance of S^k.
    LocalAsset { p: usize, d: usize, rows: Vec<f64> },
    /// rows[ft * 2] = mean, rows[ft * 2 + 1] = variance of K - sum w_k S^k.
    SignedPayoff { p: usize, strike: f64, weights: Vec<f64>, rows: Vec<f64> },
    /// rows[ft * 2d + 2k] = C^{k,-}, rows[ft * 2d + 2k + 1] = C^{k,+}.
    PolyBounds { exponents: Vec<Vec<u8>>, d: usize, rows: Vec<f64> },
}

/// Calibrate the mapping for `spec` on a simulated training store.
pub fn calibrate_mapping(
    spec: &BasisSpec,
    store: &PathStore,
    payoff: &PayoffSpec,
    style: MomentStyle,
) -> Result<StateMapping> {
    spec.validate()?;
    let params = &store.params;
    let grid = &store.grid;
    let fine_count = grid.fine_count();
    let moment = |ft: usize| -> (Vec<f64>, Vec<f64>) {
        match style {
            MomentStyle::Empirical => store.moment_mean_cov(ft),
            MomentStyle::ClosedForm => closed_form_moments(params, grid.time(ft)),
        }
    };
    match spec {
        BasisSpec::LocalHypercube { p } => {
            let d = params.d;
            let mut rows = vec![0.0; fine_count * 2 * d];
            for ft in 0..fine_count {
                let (mean, cov) = moment(ft);
                for k in 0..d {
                    rows[ft * 2 * d + 2 * k] = mean[k];
                    rows[ft * 2 * d + 2 * k + 1] = cov[MomentRow::pack(d, k, k)];
                }
            }
            Ok(StateMapping::LocalAsset { p: *p, d, rows })
        }
        BasisSpec::LocalSignedPayoff { p } => {
            let d = params.d;
            let (strike, weights) = match payoff {
                PayoffSpec::BasketPut { strike, weights } => (
                    *strike,
                    weights.clone().unwrap_or_else(|| vec![1.0 / d as f64; d]),
                ),
                PayoffSpec::Put { strike } => (*strike, vec![1.0]),
                _ => {
                    return Err(Error::config(
                        "signed-payoff basis needs a put or basket-put payoff",
                    ))
                }
            };
            let mut rows = vec![0.0; fine_count * 2];
            for ft in 0..fine_count {
                let (mean, cov) = moment(ft);
                let mut m = strike;
                for k in 0..d {
                    m -= weights[k] * mean[k];
                }
                let mut v = 0.0;
                for k in 0..d {
                    for l in 0..d {
                        let c = cov[MomentRow::pack(d, k.min(l), k.max(l))];
                        v += weights[k] * weights[l] * c;
                    }
                }
                rows[ft * 2] = m;
                rows[ft * 2 + 1] = v.max(0.0);
            }
            Ok(StateMapping::SignedPayoff { p: *p, strike, weights, rows })
        }
        BasisSpec::Polynomial { eta } => {
            Ok(poly_bounds_mapping(params, grid, *eta))
        }
    }
}

/// Closed-form bounds C^{k,+-} = s0^k exp((r - delta^k - (sigma^k)^2/2) t
/// +- 4 sigma^k sqrt(t)); independent of the sampled paths.
pub fn poly_bounds_mapping(params: &ModelParams, grid: &TimeGrid, eta: usize) -> StateMapping {
    let d = params.d;
    let fine_count = grid.fine_count();
    let mut rows = vec![0.0; fine_count * 2 * d];
    for ft in 0..fine_count {
        let t = grid.time(ft);
        for k in 0..d {
            let base = (params.r - params.delta[k] - 0.5 * params.sigma[k] * params.sigma[k]) * t;
            let spread = 4.0 * params.sigma[k] * t.sqrt();
            rows[ft * 2 * d + 2 * k] = params.s0[k] * (base - spread).exp();
            rows[ft * 2 * d + 2 * k + 1] = params.s0[k] * (base + spread).exp();
        }
    }
    StateMapping::PolyBounds { exponents: exponent_table(d, eta), d, rows }
}

/// Exact GBM mean and packed covariance at time t.
fn closed_form_moments(params: &ModelParams, t: f64) -> (Vec<f64>, Vec<f64>) {
    let d = params.d;
    let mean: Vec<f64> = (0..d)
        .map(|k| params.s0[k] * ((params.r - params.delta[k]) * t).exp())
        .collect();
    let mut cov = vec![0.0; d * (d + 1) / 2];
    let mut idx = 0;
    for k in 0..d {
        for l in k..d {
            let rho = if k == l { 1.0 } else { params.rho };
            cov[idx] = mean[k] * mean[l] * (rho * params.sigma[k] * params.sigma[l] * t).exp_m1();
            idx += 1;
        }
    }
    (mean, cov)
}

/// Multi-indices (e_1..e_d) with total degree <= eta, in a fixed order
/// starting with the constant.
pub fn exponent_table(d: usize, eta: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::with_capacity(binomial(d + eta, eta));
    let mut cur = vec![0u8; d];
    fill_exponents(d, eta, 0, 0, &mut cur, &mut out);
    out
}

fn fill_exponents(
    d: usize,
    eta: usize,
    pos: usize,
    used: usize,
    cur: &mut Vec<u8>,
    out: &mut Vec<Vec<u8>>,
) {
    if pos == d {
        out.push(cur.clone());
        return;
    }
    for e in 0..=(eta - used) {
        cur[pos] = e as u8;
        fill_exponents(d, eta, pos + 1, used + e, cur, out);
    }
    cur[pos] = 0;
}

/// Activation output: local families name their single active bin, the
/// polynomial family fills the caller's scratch with Pbar dense values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisOut {
    OneHot(usize),
    Dense,
}

/// Evaluator binding a spec to its frozen mapping.
#[derive(Debug, Clone)]
pub struct BasisEvaluator {
    pub spec: BasisSpec,
    pub mapping: StateMapping,
    pub pbar: usize,
}

impl BasisEvaluator {
    pub fn new(spec: BasisSpec, mapping: StateMapping, d: usize) -> Self {
        let pbar = spec.pbar(d);
        BasisEvaluator { spec, mapping, pbar }
    }

    /// Evaluate the basis at fine time `ft` for one spot vector. Dense
    /// output goes into `dense`, which must hold Pbar entries.
    #[inline]
    pub fn eval(&self, ft: usize, spot: &[f64], dense: &mut [f64]) -> BasisOut {
        match &self.mapping {
            StateMapping::LocalAsset { p, d, rows } => {
                let row = &rows[ft * 2 * d..(ft + 1) * 2 * d];
                let mut flat = 0;
                let mut stride = 1;
                for k in 0..*d {
                    let u = lognormal_cdf_from_moments(row[2 * k], row[2 * k + 1], spot[k]);
                    flat += local_bin(u, *p) * stride;
                    stride *= p;
                }
                BasisOut::OneHot(flat)
            }
            StateMapping::SignedPayoff { p, strike, weights, rows } => {
                let mut x = *strike;
                for (w, s) in weights.iter().zip(spot) {
                    x -= w * s;
                }
                let (m, v) = (rows[ft * 2], rows[ft * 2 + 1]);
                let u = if v <= 0.0 {
                    // Point mass: everything at or below the mean maps to the
                    // first bin, consistent with the lognormal convention.
                    if x <= m {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    norm_cdf((x - m) / v.sqrt())
                };
                BasisOut::OneHot(local_bin(u, *p))
            }
            StateMapping::PolyBounds { exponents, d, rows } => {
                let row = &rows[ft * 2 * d..(ft + 1) * 2 * d];
                // Powers of each mapped coordinate, then one product per
                // multi-index. d and eta are small, so this stays in cache.
                let mut mapped = [0.0f64; 16];
                debug_assert!(*d <= 16);
                for k in 0..*d {
                    let (lo, hi) = (row[2 * k], row[2 * k + 1]);
                    mapped[k] = if hi - lo <= 1e-12 * lo.abs().max(1.0) {
                        // Degenerate at t = 0 where all paths coincide.
                        0.5
                    } else {
                        (spot[k] - lo) / (hi - lo)
                    };
                }
                for (out, exps) in dense.iter_mut().zip(exponents) {
                    let mut v = 1.0;
                    for k in 0..*d {
                        let mut e = exps[k];
                        while e > 0 {
                            v *= mapped[k];
                            e -= 1;
                        }
                    }
                    *out = v;
                }
                BasisOut::Dense
            }
        }
    }
}

/// Bin of a mapped value in [0, 1): floor(u P) clamped into [0, P).
#[inline]
pub fn local_bin(u: f64, p: usize) -> usize {
    let b = (u * p as f64).floor();
    if b < 0.0 {
        0
    } else if b >= p as f64 {
        p - 1
    } else {
        b as usize
    }
}
