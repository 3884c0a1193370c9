//! Experiment configuration: one TOML file per experiment, mapped onto the
//! domain types and validated as a whole.
//!
//! Sections: `[model]`, `[grid]`, `[payoff]`, `[basis]`, `[instruments]`,
//! `[run]`, `[ls]`, and optional `[rogers]` and `[output]`. Per-asset model
//! fields accept either a scalar (broadcast over assets) or an explicit
//! array of length d.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::basis::{BasisSpec, MomentStyle};
use crate::error::{Error, Result};
use crate::instruments::InstrumentSet;
use crate::model::{ModelParams, StoreMode, TimeGrid};
use crate::parallel::DEFAULT_CHUNK;
use crate::payoff::PayoffSpec;

/// In-memory fine-grid budget in bytes before `Provider::Auto` switches a
/// store to regenerate-on-demand.
pub const AUTO_MEMORY_BUDGET: usize = 600 << 20;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum FloatOrList {
    One(f64),
    Many(Vec<f64>),
}

impl FloatOrList {
    fn expand(self, d: usize) -> Vec<f64> {
        match self {
            FloatOrList::One(x) => vec![x; d],
            FloatOrList::Many(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    d: usize,
    s0: FloatOrList,
    sigma: FloatOrList,
    #[serde(default)]
    delta: Option<FloatOrList>,
    r: f64,
    #[serde(default)]
    rho: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    horizon: f64,
    n: usize,
    nbar: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPayoff {
    kind: String,
    #[serde(default)]
    strike: Option<f64>,
    #[serde(default)]
    k1: Option<f64>,
    #[serde(default)]
    k2: Option<f64>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBasis {
    family: String,
    #[serde(default)]
    p: Option<usize>,
    #[serde(default)]
    eta: Option<usize>,
    #[serde(default)]
    moments: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstruments {
    vanilla: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    q_train: usize,
    q_oos: usize,
    q_pnl: usize,
    seed_train: u64,
    seed_oos: u64,
    seed_pnl: u64,
    #[serde(default)]
    chunk_size: Option<usize>,
    #[serde(default)]
    workers: Option<usize>,
    #[serde(default)]
    provider: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLs {
    degree: usize,
    #[serde(default)]
    q_ls: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRogers {
    #[serde(default)]
    reference: Option<String>,
    #[serde(default)]
    q: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    #[serde(default)]
    dir: Option<String>,
    #[serde(default)]
    bins: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    grid: RawGrid,
    payoff: RawPayoff,
    basis: RawBasis,
    instruments: RawInstruments,
    run: RawRun,
    ls: RawLs,
    #[serde(default)]
    rogers: RawRogers,
    #[serde(default)]
    output: RawOutput,
}

/// Spot-storage policy for generated path stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provider {
    /// Pick by memory footprint against `AUTO_MEMORY_BUDGET`.
    Auto,
    InMemory,
    Regenerate,
}

/// Reference portfolio selection for the scalar dual baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RogersReference {
    /// Replicate the payoff at maturity (put, or butterfly call spread).
    Replicating,
    /// A single put at the payoff's central strike.
    MidStrikePut,
}

/// Sample sizes, seeds, and execution knobs.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub q_train: usize,
    pub q_oos: usize,
    pub q_pnl: usize,
    pub seed_train: u64,
    pub seed_oos: u64,
    pub seed_pnl: u64,
    pub chunk: usize,
    pub workers: usize,
    pub provider: Provider,
}

/// A fully validated experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub params: ModelParams,
    pub grid: TimeGrid,
    pub payoff: PayoffSpec,
    pub basis: BasisSpec,
    pub moments: MomentStyle,
    pub vanilla: bool,
    pub run: RunSettings,
    pub ls_degree: usize,
    pub q_ls: usize,
    pub rogers_reference: RogersReference,
    pub q_rogers: usize,
    pub out_dir: PathBuf,
    pub bins: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        let d = raw.model.d;
        let params = ModelParams {
            d,
            s0: raw.model.s0.expand(d),
            sigma: raw.model.sigma.expand(d),
            delta: raw.model.delta.map_or_else(|| vec![0.0; d], |v| v.expand(d)),
            r: raw.model.r,
            rho: raw.model.rho,
            horizon: raw.grid.horizon,
        };
        let grid = TimeGrid { n: raw.grid.n, nbar: raw.grid.nbar, horizon: raw.grid.horizon };

        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::config(format!("payoff.{name} is required for this kind")))
        };
        let payoff = match raw.payoff.kind.as_str() {
            "put" => PayoffSpec::Put { strike: need(raw.payoff.strike, "strike")? },
            "butterfly" => PayoffSpec::Butterfly {
                k1: need(raw.payoff.k1, "k1")?,
                k2: need(raw.payoff.k2, "k2")?,
            },
            "max_call" => PayoffSpec::MaxCall { strike: need(raw.payoff.strike, "strike")? },
            "min_put" => PayoffSpec::MinPut { strike: need(raw.payoff.strike, "strike")? },
            "basket_put" => PayoffSpec::BasketPut {
                strike: need(raw.payoff.strike, "strike")?,
                weights: raw.payoff.weights,
            },
            other => {
                return Err(Error::config(format!(
                    "unknown payoff kind '{other}' (put, butterfly, max_call, min_put, basket_put)"
                )))
            }
        };

        let need_p = || {
            raw.basis
                .p
                .ok_or_else(|| Error::config("basis.p is required for local families"))
        };
        let basis = match raw.basis.family.as_str() {
            "local_hypercube" => BasisSpec::LocalHypercube { p: need_p()? },
            "local_signed_payoff" => BasisSpec::LocalSignedPayoff { p: need_p()? },
            "polynomial" => BasisSpec::Polynomial {
                eta: raw
                    .basis
                    .eta
                    .ok_or_else(|| Error::config("basis.eta is required for polynomial"))?,
            },
            other => {
                return Err(Error::config(format!(
                    "unknown basis family '{other}' (local_hypercube, local_signed_payoff, polynomial)"
                )))
            }
        };
        let moments = match raw.basis.moments.as_deref() {
            None | Some("empirical") => MomentStyle::Empirical,
            Some("closed_form") => MomentStyle::ClosedForm,
            Some(other) => {
                return Err(Error::config(format!(
                    "unknown basis.moments '{other}' (empirical, closed_form)"
                )))
            }
        };

        let provider = match raw.run.provider.as_deref() {
            None | Some("auto") => Provider::Auto,
            Some("in_memory") => Provider::InMemory,
            Some("regenerate") => Provider::Regenerate,
            Some(other) => {
                return Err(Error::config(format!(
                    "unknown run.provider '{other}' (auto, in_memory, regenerate)"
                )))
            }
        };
        let run = RunSettings {
            q_train: raw.run.q_train,
            q_oos: raw.run.q_oos,
            q_pnl: raw.run.q_pnl,
            seed_train: raw.run.seed_train,
            seed_oos: raw.run.seed_oos,
            seed_pnl: raw.run.seed_pnl,
            chunk: raw.run.chunk_size.unwrap_or(DEFAULT_CHUNK),
            workers: raw.run.workers.unwrap_or(0),
            provider,
        };

        let rogers_reference = match raw.rogers.reference.as_deref() {
            None | Some("replicating") => RogersReference::Replicating,
            Some("mid_strike_put") => RogersReference::MidStrikePut,
            Some(other) => {
                return Err(Error::config(format!(
                    "unknown rogers.reference '{other}' (replicating, mid_strike_put)"
                )))
            }
        };

        let cfg = ExperimentConfig {
            params,
            grid,
            payoff,
            basis,
            moments,
            vanilla: raw.instruments.vanilla,
            q_ls: raw.ls.q_ls.unwrap_or(raw.run.q_train),
            ls_degree: raw.ls.degree,
            q_rogers: raw.rogers.q.unwrap_or(raw.run.q_train),
            rogers_reference,
            out_dir: PathBuf::from(raw.output.dir.unwrap_or_else(|| ".".into())),
            bins: raw.output.bins.unwrap_or(crate::pnl::DEFAULT_BINS),
            run,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.grid.validate()?;
        self.payoff.validate(self.params.d)?;
        self.basis.validate()?;
        self.instrument_set().validate(self.params.d)?;
        let r = &self.run;
        for (name, q) in [
            ("run.q_train", r.q_train),
            ("run.q_oos", r.q_oos),
            ("run.q_pnl", r.q_pnl),
            ("ls.q_ls", self.q_ls),
            ("rogers.q", self.q_rogers),
        ] {
            if q == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if r.chunk == 0 {
            return Err(Error::config("run.chunk_size must be at least 1"));
        }
        if r.seed_train == r.seed_oos || r.seed_train == r.seed_pnl || r.seed_oos == r.seed_pnl {
            return Err(Error::config(format!(
                "seeds must be pairwise distinct, got train={} oos={} pnl={}",
                r.seed_train, r.seed_oos, r.seed_pnl
            )));
        }
        if self.bins == 0 {
            return Err(Error::config("output.bins must be at least 1"));
        }
        Ok(())
    }

    /// Hedge universe implied by the `[instruments]` section.
    pub fn instrument_set(&self) -> InstrumentSet {
        if self.vanilla {
            InstrumentSet::with_vanillas(&self.params, &self.payoff)
        } else {
            InstrumentSet::assets_only(self.params.d)
        }
    }

    /// Resolve the storage mode for a store of `q` paths.
    pub fn store_mode(&self, q: usize) -> StoreMode {
        match self.run.provider {
            Provider::InMemory => StoreMode::InMemory,
            Provider::Regenerate => StoreMode::Regenerate,
            Provider::Auto => {
                let bytes = q * self.grid.fine_count() * self.params.d * 8;
                if bytes > AUTO_MEMORY_BUDGET {
                    StoreMode::Regenerate
                } else {
                    StoreMode::InMemory
                }
            }
        }
    }
}
