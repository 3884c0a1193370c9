//! Tradable instruments whose discounted-price increments span the hedge.
//!
//! Every instrument is observed through its discounted time-t price, which
//! is a martingale under the pricing measure: dividend-reinvested assets
//! e^((delta - r) t) S^k_t, and European vanillas e^(-r t) BS(t, S^k_t)
//! maturing at the horizon. Hedge increments are differences of these
//! values along the subtick grid, so any admissible portfolio of them is
//! itself a martingale started at zero.

use crate::analytics::{bs_call, bs_put, BsQuote};
use crate::error::{Error, Result};
use crate::model::{ModelParams, TimeGrid};
use crate::payoff::PayoffSpec;

/// One hedgeable instrument, valued through its discounted price.
#[derive(Debug, Clone, PartialEq)]
pub enum Instrument {
    /// Dividend-reinvested asset k: e^((delta_k - r) t) S^k_t.
    Asset { k: usize },
    /// Discounted European put on asset k maturing at the horizon.
    VanillaPut { k: usize, strike: f64 },
    /// Discounted European call on asset k maturing at the horizon.
    VanillaCall { k: usize, strike: f64 },
}

/// The hedge universe: dbar instruments over d assets.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentSet {
    pub list: Vec<Instrument>,
}

impl InstrumentSet {
    /// Assets only: dbar = d.
    pub fn assets_only(d: usize) -> Self {
        InstrumentSet { list: (0..d).map(|k| Instrument::Asset { k }).collect() }
    }

    /// Assets plus the standard vanilla overlay for the given payoff:
    /// a put at the strike for single-asset puts, a call at the midpoint
    /// strike for butterflies, and one at-the-money call per asset
    /// otherwise. dbar = d + 1 for the single-asset cases, 2d otherwise.
    pub fn with_vanillas(params: &ModelParams, payoff: &PayoffSpec) -> Self {
        let mut list: Vec<Instrument> = (0..params.d).map(|k| Instrument::Asset { k }).collect();
        match payoff {
            PayoffSpec::Put { strike } => {
                list.push(Instrument::VanillaPut { k: 0, strike: *strike });
            }
            PayoffSpec::Butterfly { k1, k2 } => {
                list.push(Instrument::VanillaCall { k: 0, strike: 0.5 * (k1 + k2) });
            }
            _ => {
                for k in 0..params.d {
                    list.push(Instrument::VanillaCall { k, strike: params.s0[k] });
                }
            }
        }
        InstrumentSet { list }
    }

    pub fn dbar(&self) -> usize {
        self.list.len()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.list.is_empty() {
            return Err(Error::config("instrument set is empty"));
        }
        for ins in &self.list {
            let (k, strike) = match ins {
                Instrument::Asset { k } => (*k, 1.0),
                Instrument::VanillaPut { k, strike } | Instrument::VanillaCall { k, strike } => {
                    (*k, *strike)
                }
            };
            if k >= d {
                return Err(Error::config(format!("instrument on asset {k} but d = {d}")));
            }
            if !(strike > 0.0) {
                return Err(Error::config("vanilla strike must be positive"));
            }
        }
        Ok(())
    }
}

/// Evaluates discounted instrument prices along a fine grid, with the
/// per-time scalar factors precomputed once.
pub struct InstrumentEvaluator {
    pub set: InstrumentSet,
    /// factors[ft * dbar + c]: multiplier for assets, discount for vanillas.
    factors: Vec<f64>,
    /// times[ft]: calendar time of fine tick ft.
    times: Vec<f64>,
    params: ModelParams,
    dbar: usize,
}

impl InstrumentEvaluator {
    pub fn new(set: InstrumentSet, params: &ModelParams, grid: &TimeGrid) -> Result<Self> {
        set.validate(params.d)?;
        let dbar = set.dbar();
        let fine_count = grid.fine_count();
        let mut factors = vec![0.0; fine_count * dbar];
        let mut times = vec![0.0; fine_count];
        for ft in 0..fine_count {
            let t = grid.time(ft);
            times[ft] = t;
            for (c, ins) in set.list.iter().enumerate() {
                factors[ft * dbar + c] = match ins {
                    Instrument::Asset { k } => ((params.delta[*k] - params.r) * t).exp(),
                    Instrument::VanillaPut { .. } | Instrument::VanillaCall { .. } => {
                        (-params.r * t).exp()
                    }
                };
            }
        }
        Ok(InstrumentEvaluator { set, factors, times, params: params.clone(), dbar })
    }

    pub fn dbar(&self) -> usize {
        self.dbar
    }

    /// Discounted prices of all instruments at fine tick ft given the spot
    /// vector; writes dbar values into `out`.
    #[inline]
    pub fn eval(&self, ft: usize, spot: &[f64], out: &mut [f64]) {
        let t = self.times[ft];
        let row = &self.factors[ft * self.dbar..(ft + 1) * self.dbar];
        for (c, ins) in self.set.list.iter().enumerate() {
            out[c] = match ins {
                Instrument::Asset { k } => row[c] * spot[*k],
                Instrument::VanillaPut { k, strike } => {
                    row[c] * bs_put(&self.quote(t, spot[*k], *strike, *k))
                }
                Instrument::VanillaCall { k, strike } => {
                    row[c] * bs_call(&self.quote(t, spot[*k], *strike, *k))
                }
            };
        }
    }

    #[inline]
    fn quote(&self, t: f64, x: f64, k: f64, asset: usize) -> BsQuote {
        BsQuote {
            t,
            x,
            k,
            maturity: self.params.horizon,
            r: self.params.r,
            sigma: self.params.sigma[asset],
            delta: self.params.delta[asset],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PathStore, StoreMode};

    fn params1() -> ModelParams {
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

    #[test]
    fn standard_sets_have_expected_width() {
        let p1 = params1();
        assert_eq!(InstrumentSet::assets_only(1).dbar(), 1);
        let s = InstrumentSet::with_vanillas(&p1, &PayoffSpec::Put { strike: 100.0 });
        assert_eq!(s.dbar(), 2);
        assert_eq!(s.list[1], Instrument::VanillaPut { k: 0, strike: 100.0 });
        let b = InstrumentSet::with_vanillas(&p1, &PayoffSpec::Butterfly { k1: 90.0, k2: 110.0 });
        assert_eq!(b.list[1], Instrument::VanillaCall { k: 0, strike: 100.0 });
        let mut p2 = params1();
        p2.d = 2;
        p2.s0 = vec![90.0, 95.0];
        p2.sigma = vec![0.2, 0.2];
        p2.delta = vec![0.1, 0.1];
        let m = InstrumentSet::with_vanillas(&p2, &PayoffSpec::MaxCall { strike: 100.0 });
        assert_eq!(m.dbar(), 4);
        assert_eq!(m.list[3], Instrument::VanillaCall { k: 1, strike: 95.0 });
    }

    #[test]
    fn validation_rejects_bad_sets() {
        assert!(InstrumentSet { list: vec![] }.validate(1).is_err());
        assert!(InstrumentSet { list: vec![Instrument::Asset { k: 1 }] }.validate(1).is_err());
        assert!(InstrumentSet { list: vec![Instrument::VanillaPut { k: 0, strike: 0.0 }] }
            .validate(1)
            .is_err());
    }

    #[test]
    fn asset_value_is_discounted_spot() {
        let params = params1();
        let grid = TimeGrid { n: 2, nbar: 2, horizon: 0.5 };
        let ev =
            InstrumentEvaluator::new(InstrumentSet::assets_only(1), &params, &grid).unwrap();
        let mut out = [0.0];
        ev.eval(2, &[110.0], &mut out);
        let t = grid.time(2);
        assert!((out[0] - 110.0 * (-0.06f64 * t).exp()).abs() < 1e-12);
    }

    #[test]
    fn vanilla_value_at_maturity_is_discounted_payoff() {
        let params = params1();
        let grid = TimeGrid { n: 2, nbar: 1, horizon: 0.5 };
        let set = InstrumentSet::with_vanillas(&params, &PayoffSpec::Put { strike: 100.0 });
        let ev = InstrumentEvaluator::new(set, &params, &grid).unwrap();
        let mut out = [0.0; 2];
        ev.eval(2, &[83.0], &mut out);
        let df = (-0.06f64 * 0.5).exp();
        assert!((out[1] - df * 17.0).abs() < 1e-12);
        ev.eval(2, &[123.0], &mut out);
        assert!(out[1].abs() < 1e-12);
    }

    /// Discounted instrument prices are martingales: their mean at any
    /// fine tick equals the time-0 value, up to Monte Carlo error.
    #[test]
    fn discounted_prices_are_martingales() {
        let params = params1();
        let grid = TimeGrid { n: 5, nbar: 2, horizon: 0.5 };
        let set = InstrumentSet::with_vanillas(&params, &PayoffSpec::Put { strike: 100.0 });
        let ev = InstrumentEvaluator::new(set, &params, &grid).unwrap();
        let store =
            PathStore::generate(params.clone(), grid, 200_000, 7, StoreMode::InMemory, 16_384)
                .unwrap();
        let mut v0 = [0.0; 2];
        ev.eval(0, &[100.0], &mut v0);
        for i in [2usize, 5] {
            let ft = store.grid.exercise_fine(i);
            let mut sum = [0.0f64; 2];
            let mut sum2 = [0.0f64; 2];
            let mut out = [0.0; 2];
            for q in 0..store.q {
                ev.eval(ft, &store.exercise(q)[i..i + 1], &mut out);
                for c in 0..2 {
                    sum[c] += out[c];
                    sum2[c] += out[c] * out[c];
                }
            }
            for c in 0..2 {
                let mean = sum[c] / store.q as f64;
                let var = (sum2[c] / store.q as f64 - mean * mean).max(0.0);
                let se = (var / store.q as f64).sqrt();
                assert!(
                    (mean - v0[c]).abs() < 4.0 * se + 1e-9,
                    "instrument {c} at date {i}: {mean} vs {}",
                    v0[c]
                );
            }
        }
    }

    /// Increments along the fine grid telescope to the end-to-end change.
    #[test]
    fn increments_telescope() {
        let params = params1();
        let grid = TimeGrid { n: 4, nbar: 3, horizon: 0.5 };
        let set = InstrumentSet::with_vanillas(&params, &PayoffSpec::Put { strike: 100.0 });
        let ev = InstrumentEvaluator::new(set, &params, &grid).unwrap();
        let store = PathStore::generate(params, grid, 256, 11, StoreMode::InMemory, 64).unwrap();
        for q in [0usize, 17, 255] {
            let mut acc = [0.0f64; 2];
            let mut first = [0.0f64; 2];
            let mut last = [0.0f64; 2];
            let mut prev = [0.0f64; 2];
            for i in 0..store.grid.n {
                let slab = store.slab(i);
                let path = slab.path(q);
                for lf in 0..=store.grid.nbar {
                    let ft = store.grid.subtick_fine(i, lf);
                    let mut cur = [0.0; 2];
                    ev.eval(ft, &path[lf..lf + 1], &mut cur);
                    if ft == 0 {
                        first = cur;
                    } else if !(i > 0 && lf == 0) {
                        // Interior slab endpoints appear twice; count once.
                        for c in 0..2 {
                            acc[c] += cur[c] - prev[c];
                        }
                    }
                    prev = cur;
                    last = cur;
                }
            }
            for c in 0..2 {
                assert!(
                    (acc[c] - (last[c] - first[c])).abs() < 1e-10,
                    "path {q} instrument {c}"
                );
            }
        }
    }
}
