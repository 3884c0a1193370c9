//! Closed-form Black-Scholes prices and distribution functions.
//!
//! Everything here is deterministic scalar math: the normal CDF and its
//! inverse, European put/call prices under continuous dividends, and the
//! moment-matched lognormal CDF used by the local regression bases.

/// Standard normal cumulative distribution function.
///
/// Uses the complementary error function, absolute accuracy better than 1e-12.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse standard normal CDF (Wichura's AS 241, double precision).
///
/// Relative accuracy about 1e-15 for p in (1e-300, 1 - 1e-16). Inputs at or
/// outside {0, 1} return +/- infinity.
pub fn norm_inv_cdf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(r, &A_CEN) / poly(r, &B_CEN);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(r, &C_MID) / poly(r, &D_MID)
    } else {
        let r = r - 5.0;
        poly(r, &E_TAIL) / poly(r, &F_TAIL)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

fn poly(x: f64, coeffs: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * x + c;
    }
    acc
}

const A_CEN: [f64; 8] = [
    3.387_132_872_796_366_608e0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
const B_CEN: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
const C_MID: [f64; 8] = [
    1.423_437_110_749_683_577_34e0,
    4.630_337_846_156_545_295_9e0,
    5.769_497_221_460_691_405_5e0,
    3.647_848_324_763_204_605_04e0,
    1.270_458_252_452_368_382_58e0,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
const D_MID: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87e0,
    1.676_384_830_183_803_849_4e0,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
const E_TAIL: [f64; 8] = [
    6.657_904_643_501_103_777_2e0,
    5.463_784_911_164_114_369_9e0,
    1.784_826_539_917_291_335_8e0,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const F_TAIL: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

/// Inputs of a European vanilla quote: value time `t`, spot `x`, strike `k`,
/// maturity `maturity`, and the model scalars.
#[derive(Debug, Clone, Copy)]
pub struct BsQuote {
    pub t: f64,
    pub x: f64,
    pub k: f64,
    pub maturity: f64,
    pub r: f64,
    pub sigma: f64,
    pub delta: f64,
}

impl BsQuote {
    fn tau(&self) -> f64 {
        (self.maturity - self.t).max(0.0)
    }
}

/// Time-t Black-Scholes price of the European put, continuous dividend yield.
///
/// sigma * sqrt(tau) below 1e-12 takes the deterministic-forward limit
/// (K e^{-r tau} - x e^{-delta tau})_+ to avoid 0/0 in d1.
pub fn bs_put(q: &BsQuote) -> f64 {
    let tau = q.tau();
    let vol = q.sigma * tau.sqrt();
    let df_k = q.k * (-q.r * tau).exp();
    let df_x = q.x * (-q.delta * tau).exp();
    if vol < 1e-12 {
        return (df_k - df_x).max(0.0);
    }
    let d1 = ((q.x / q.k).ln() + (q.r - q.delta + 0.5 * q.sigma * q.sigma) * tau) / vol;
    let d2 = d1 - vol;
    df_k * norm_cdf(-d2) - df_x * norm_cdf(-d1)
}

/// Time-t Black-Scholes price of the European call, continuous dividend yield.
pub fn bs_call(q: &BsQuote) -> f64 {
    let tau = q.tau();
    let vol = q.sigma * tau.sqrt();
    let df_k = q.k * (-q.r * tau).exp();
    let df_x = q.x * (-q.delta * tau).exp();
    if vol < 1e-12 {
        return (df_x - df_k).max(0.0);
    }
    let d1 = ((q.x / q.k).ln() + (q.r - q.delta + 0.5 * q.sigma * q.sigma) * tau) / vol;
    let d2 = d1 - vol;
    df_x * norm_cdf(d1) - df_k * norm_cdf(d2)
}

/// CDF at `x` of the lognormal distribution matching the given first two
/// moments: mean = e^{mu + s^2/2}, variance = (e^{s^2} - 1) e^{2 mu + s^2}.
///
/// Degenerate variance collapses to the point mass at the mean (0 for
/// x <= mean, 1 above). Requires mean > 0.
pub fn lognormal_cdf_from_moments(mean: f64, variance: f64, x: f64) -> f64 {
    assert!(mean > 0.0, "lognormal mean must be positive, got {mean}");
    assert!(variance >= 0.0, "variance must be nonnegative, got {variance}");
    if x <= 0.0 {
        return 0.0;
    }
    if variance <= mean * mean * 1e-30 {
        return if x <= mean { 0.0 } else { 1.0 };
    }
    let s2 = (1.0 + variance / (mean * mean)).ln();
    let mu = mean.ln() - 0.5 * s2;
    norm_cdf((x.ln() - mu) / s2.sqrt())
}
