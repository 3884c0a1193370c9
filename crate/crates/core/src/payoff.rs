//! Bermudan payoff functions and discounted reward matrices.
//!
//! All payoffs map nonnegative spot vectors to nonnegative exercise values.
//! The reward matrix holds Z[q][n] = e^{-r T_n} Psi(S_{T_n}), the exercise
//! value discounted to time zero.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{discount_factor, PathStore};

/// Counts evaluations where a payoff formula produced a negative value and
/// was clamped to zero. Stays at zero for correct formulas.
static NEGATIVE_CLAMPS: AtomicU64 = AtomicU64::new(0);

pub fn negative_clamp_count() -> u64 {
    NEGATIVE_CLAMPS.load(Ordering::Relaxed)
}

/// Payoff selection with strikes.
#[derive(Debug, Clone, PartialEq)]
pub enum PayoffSpec {
    /// (K - S)_+, single asset.
    Put { strike: f64 },
    /// Put-spread tent (K1-S)_+ + (K2-S)_+ - 2((K1+K2)/2 - S)_+, single
    /// asset: zero outside [K1, K2], peak (K2-K1)/2 at the midpoint.
    Butterfly { k1: f64, k2: f64 },
    /// (max_k S^k - K)_+.
    MaxCall { strike: f64 },
    /// (K - min_k S^k)_+.
    MinPut { strike: f64 },
    /// (K - sum_k w_k S^k)_+ with equal weights 1/d by default.
    BasketPut { strike: f64, weights: Option<Vec<f64>> },
}

impl PayoffSpec {
    pub fn validate(&self, d: usize) -> Result<()> {
        let positive = |k: f64, name: &str| {
            if k > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be positive, got {k}")))
            }
        };
        match self {
            PayoffSpec::Put { strike } => {
                positive(*strike, "strike")?;
                if d != 1 {
                    return Err(Error::config("put payoff needs d = 1"));
                }
            }
            PayoffSpec::Butterfly { k1, k2 } => {
                positive(*k1, "k1")?;
                positive(*k2, "k2")?;
                if k1 >= k2 {
                    return Err(Error::config("butterfly needs k1 < k2"));
                }
                if d != 1 {
                    return Err(Error::config("butterfly payoff needs d = 1"));
                }
                self.check_butterfly_nonnegative()?;
            }
            PayoffSpec::MaxCall { strike } | PayoffSpec::MinPut { strike } => {
                positive(*strike, "strike")?;
                if d == 0 {
                    return Err(Error::config("payoff needs d >= 1"));
                }
            }
            PayoffSpec::BasketPut { strike, weights } => {
                positive(*strike, "strike")?;
                if let Some(w) = weights {
                    if w.len() != d {
                        return Err(Error::config("basket weights length must equal d"));
                    }
                    if w.iter().any(|&x| !(x >= 0.0)) {
                        return Err(Error::config("basket weights must be nonnegative"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Dense-grid check that the butterfly formula is nonnegative on
    /// [0, 2 K2] and that the three-term form agrees with the evaluated tent.
    fn check_butterfly_nonnegative(&self) -> Result<()> {
        let (k1, k2) = match self {
            PayoffSpec::Butterfly { k1, k2 } => (*k1, *k2),
            _ => unreachable!(),
        };
        let mid = 0.5 * (k1 + k2);
        for i in 0..=4_000 {
            let s = 2.0 * k2 * i as f64 / 4_000.0;
            let three_term =
                (k1 - s).max(0.0) + (k2 - s).max(0.0) - 2.0 * (mid - s).max(0.0);
            if three_term < -1e-9 * k2 {
                return Err(Error::numeric(format!(
                    "butterfly payoff negative at S = {s}: {three_term}"
                )));
            }
            let tent = (s - k1).min(k2 - s).max(0.0);
            if (three_term.max(0.0) - tent).abs() > 1e-9 * k2 {
                return Err(Error::numeric(format!(
                    "butterfly forms disagree at S = {s}"
                )));
            }
        }
        Ok(())
    }

    /// Exercise value Psi(S). Every formula carries its own positive part,
    /// so a negative result means the formula is broken; such values are
    /// clamped to zero and counted.
    pub fn evaluate(&self, spot: &[f64]) -> f64 {
        debug_assert!(!spot.is_empty());
        let raw = match self {
            PayoffSpec::Put { strike } => (strike - spot[0]).max(0.0),
            // min(S - K1, K2 - S) clamped at zero is the cancellation-free
            // form of the put-spread tent; validate() verifies the identity
            // with the three-term formula on a dense grid.
            PayoffSpec::Butterfly { k1, k2 } => (spot[0] - k1).min(k2 - spot[0]).max(0.0),
            PayoffSpec::MaxCall { strike } => {
                (spot.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - strike).max(0.0)
            }
            PayoffSpec::MinPut { strike } => {
                (strike - spot.iter().cloned().fold(f64::INFINITY, f64::min)).max(0.0)
            }
            PayoffSpec::BasketPut { strike, weights } => {
                let mean = match weights {
                    Some(w) => spot.iter().zip(w).map(|(s, w)| s * w).sum::<f64>(),
                    None => spot.iter().sum::<f64>() / spot.len() as f64,
                };
                (strike - mean).max(0.0)
            }
        };
        if raw < 0.0 {
            NEGATIVE_CLAMPS.fetch_add(1, Ordering::Relaxed);
            return 0.0;
        }
        raw
    }
}

/// Discounted exercise values, path-major: z[q * (N+1) + n].
pub struct RewardMatrix {
    pub q: usize,
    pub dates: usize,
    z: Vec<f64>,
}

impl RewardMatrix {
    /// Z[q][n] = e^{-r T_n} Psi(checkpoint spots of path q at date n).
    pub fn build(spec: &PayoffSpec, store: &PathStore) -> Result<Self> {
        spec.validate(store.params.d)?;
        let n = store.grid.n;
        let d = store.params.d;
        let dates = n + 1;
        let discounts: Vec<f64> = (0..dates)
            .map(|i| discount_factor(store.params.r, store.grid.time(store.grid.exercise_fine(i))))
            .collect();
        let mut z = vec![0.0; store.q * dates];
        z.par_chunks_mut(store.chunk * dates).enumerate().for_each(|(c, block)| {
            let q_lo = c * store.chunk;
            for (row, zrow) in block.chunks_mut(dates).enumerate() {
                let cp = store.exercise(q_lo + row);
                for (i, zi) in zrow.iter_mut().enumerate() {
                    *zi = discounts[i] * spec.evaluate(&cp[i * d..(i + 1) * d]);
                }
            }
        });
        Ok(RewardMatrix { q: store.q, dates, z })
    }

    #[inline]
    pub fn row(&self, q: usize) -> &[f64] {
        &self.z[q * self.dates..(q + 1) * self.dates]
    }

    /// Column copy: Z at one exercise date across paths.
    pub fn date_column(&self, n: usize) -> Vec<f64> {
        (0..self.q).map(|q| self.row(q)[n]).collect()
    }

    pub fn from_raw(q: usize, dates: usize, z: Vec<f64>) -> Self {
        assert_eq!(z.len(), q * dates);
        RewardMatrix { q, dates, z }
    }
}
