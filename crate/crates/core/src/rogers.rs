//! Scalar dual baseline: a single multiplier on a fixed reference
//! martingale.
//!
//! The reference is the discounted price process of a small static vanilla
//! portfolio, recentred to start at zero. The upper bound
//! g(alpha) = E[max_n (Z_n - alpha M_n)] is convex and piecewise linear in
//! the multiplier and coercive whenever the reference actually moves, so a
//! bracketed golden-section search finds the optimum to any tolerance.

use crate::dual::{weighted_price, DualEstimate};
use crate::error::{Error, Result};
use crate::instruments::{Instrument, InstrumentEvaluator, InstrumentSet};
use crate::model::PathStore;
use crate::parallel::par_chunk_reduce;
use crate::payoff::{PayoffSpec, RewardMatrix};
use rayon::prelude::*;

/// Interval-length tolerance of the multiplier search.
pub const MULTIPLIER_TOL: f64 = 1e-6;
/// Initial search bracket for the multiplier.
pub const BRACKET: (f64, f64) = (-1.0, 3.0);

/// Static vanilla portfolio whose discounted price supplies the reference
/// martingale.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePortfolio {
    pub legs: Vec<(f64, Instrument)>,
}

impl ReferencePortfolio {
    /// Portfolio replicating the payoff at maturity: the put itself for
    /// single-asset puts, the three-call butterfly spread for butterflies.
    pub fn for_payoff(payoff: &PayoffSpec) -> Result<Self> {
        match payoff {
            PayoffSpec::Put { strike } => Ok(ReferencePortfolio {
                legs: vec![(1.0, Instrument::VanillaPut { k: 0, strike: *strike })],
            }),
            PayoffSpec::Butterfly { k1, k2 } => Ok(ReferencePortfolio {
                legs: vec![
                    (1.0, Instrument::VanillaCall { k: 0, strike: *k1 }),
                    (-2.0, Instrument::VanillaCall { k: 0, strike: 0.5 * (k1 + k2) }),
                    (1.0, Instrument::VanillaCall { k: 0, strike: *k2 }),
                ],
            }),
            _ => Err(Error::config(
                "no built-in reference portfolio for this payoff; use a put or butterfly",
            )),
        }
    }

    /// Deliberately mismatched reference: a single put at the payoff's
    /// central strike. Quantifies how much the bound degrades when the
    /// reference spans the payoff poorly.
    pub fn mid_strike_put(payoff: &PayoffSpec) -> Result<Self> {
        let strike = match payoff {
            PayoffSpec::Put { strike } => *strike,
            PayoffSpec::Butterfly { k1, k2 } => 0.5 * (k1 + k2),
            _ => {
                return Err(Error::config(
                    "mid-strike put reference needs a put or butterfly payoff",
                ))
            }
        };
        Ok(ReferencePortfolio { legs: vec![(1.0, Instrument::VanillaPut { k: 0, strike })] })
    }
}

/// Cumulative reference-martingale values at the exercise dates, path-major
/// with n + 1 entries per path and M_0 = 0.
pub fn reference_martingale(store: &PathStore, portfolio: &ReferencePortfolio) -> Result<Vec<f64>> {
    if portfolio.legs.is_empty() {
        return Err(Error::config("reference portfolio is empty"));
    }
    let set = InstrumentSet { list: portfolio.legs.iter().map(|(_, i)| i.clone()).collect() };
    let evaluator = InstrumentEvaluator::new(set, &store.params, &store.grid)?;
    let n = store.grid.n;
    let d = store.params.d;
    let dbar = portfolio.legs.len();
    let weights: Vec<f64> = portfolio.legs.iter().map(|(w, _)| *w).collect();
    let mut m = vec![0.0; store.q * (n + 1)];
    m.par_chunks_mut(store.chunk * (n + 1)).enumerate().for_each(|(ci, rows)| {
        let q_lo = ci * store.chunk;
        let mut vals = vec![0.0; dbar];
        for (off, row) in rows.chunks_mut(n + 1).enumerate() {
            let spots = store.exercise(q_lo + off);
            let mut v0 = 0.0;
            for date in 0..=n {
                let ft = store.grid.exercise_fine(date);
                evaluator.eval(ft, &spots[date * d..(date + 1) * d], &mut vals);
                let v: f64 = weights.iter().zip(&vals).map(|(w, x)| w * x).sum();
                if date == 0 {
                    v0 = v;
                }
                row[date] = v - v0;
            }
        }
    });
    Ok(m)
}

/// Upper bound at one multiplier: weighted mean of the pathwise maxima of
/// Z_n - alpha M_n over the exercise dates.
pub fn scalar_dual_objective(
    rewards: &RewardMatrix,
    mref: &[f64],
    weights: Option<&[f64]>,
    alpha: f64,
) -> f64 {
    let dates = rewards.dates;
    let acc = par_chunk_reduce(
        rewards.q,
        16_384,
        |lo, hi| {
            let mut acc = 0.0;
            for q in lo..hi {
                let z = rewards.row(q);
                let m = &mref[q * dates..(q + 1) * dates];
                let best = z
                    .iter()
                    .zip(m)
                    .map(|(z, m)| z - alpha * m)
                    .fold(f64::NEG_INFINITY, f64::max);
                acc += match weights {
                    Some(w) => w[q] * best,
                    None => best,
                };
            }
            acc
        },
        |a, b| a + b,
    )
    .unwrap_or(0.0);
    match weights {
        Some(_) => acc,
        None => acc / rewards.q as f64,
    }
}

fn pathwise_maxima(rewards: &RewardMatrix, mref: &[f64], alpha: f64) -> Vec<f64> {
    let dates = rewards.dates;
    (0..rewards.q)
        .map(|q| {
            let z = rewards.row(q);
            let m = &mref[q * dates..(q + 1) * dates];
            z.iter().zip(m).map(|(z, m)| z - alpha * m).fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Optimized scalar dual bound.
#[derive(Debug, Clone, Copy)]
pub struct ScalarDual {
    pub multiplier: f64,
    pub estimate: DualEstimate,
}

/// Minimize the scalar dual objective by golden-section search, expanding
/// the initial bracket until the minimum is interior.
pub fn minimize_scalar_dual(
    rewards: &RewardMatrix,
    mref: &[f64],
    weights: Option<&[f64]>,
) -> Result<ScalarDual> {
    if mref.len() != rewards.q * rewards.dates {
        return Err(Error::config("reference martingale does not match the rewards"));
    }
    if let Some(w) = weights {
        if w.len() != rewards.q {
            return Err(Error::config("weights length does not match the rewards"));
        }
    }
    let g = |alpha: f64| scalar_dual_objective(rewards, mref, weights, alpha);
    let (mut a, mut b) = BRACKET;

    // Convexity: a rise moving inward from an endpoint proves the minimum
    // lies outside on that side, so push the endpoint out.
    let mut guard = 0;
    while g(a + 1e-4 * (b - a)) > g(a) {
        a -= b - a;
        guard += 1;
        if guard > 60 {
            return Err(Error::numeric("scalar dual objective decreases without bound"));
        }
    }
    while g(b - 1e-4 * (b - a)) > g(b) {
        b += b - a;
        guard += 1;
        if guard > 60 {
            return Err(Error::numeric("scalar dual objective decreases without bound"));
        }
    }

    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut g1 = g(x1);
    let mut g2 = g(x2);
    while b - a > MULTIPLIER_TOL {
        if g1 <= g2 {
            b = x2;
            x2 = x1;
            g2 = g1;
            x1 = b - inv_phi * (b - a);
            g1 = g(x1);
        } else {
            a = x1;
            x1 = x2;
            g1 = g2;
            x2 = a + inv_phi * (b - a);
            g2 = g(x2);
        }
    }
    let multiplier = 0.5 * (a + b);
    let vals = pathwise_maxima(rewards, mref, multiplier);
    Ok(ScalarDual { multiplier, estimate: weighted_price(&vals, weights) })
}
