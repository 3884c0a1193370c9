//! Counter-based Gaussian streams with exact skip-ahead.
//!
//! Every simulated path owns an independent ChaCha8 stream (stream id = path
//! index), and each standard normal consumes exactly one `next_u64`, i.e. two
//! 32-bit ChaCha words. That fixed consumption makes the position after `m`
//! normals a pure function of `m`, so a path segment can be regenerated from
//! any step without replaying the draws before it.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analytics::norm_inv_cdf;

/// Words consumed per normal draw: one u64 = two 32-bit ChaCha words.
const WORDS_PER_NORMAL: u128 = 2;

/// Gaussian stream for one path, addressable by draw index.
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    /// Stream for path `path` under master seed `seed`.
    pub fn for_path(seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        Self { rng }
    }

    /// Position the stream so the next draw is normal number `m` (0-based).
    pub fn skip_to(&mut self, m: u128) {
        self.rng.set_word_pos(m * WORDS_PER_NORMAL);
    }

    /// Next standard normal draw.
    pub fn next_normal(&mut self) -> f64 {
        norm_inv_cdf(uniform_open(self.rng.next_u64()))
    }
}

/// Map a u64 to the open interval (0, 1): 52-bit mantissa, half-step offset.
/// Both endpoints stay representable and strictly excluded; with 53 bits the
/// top value 1 - 2^-54 would round to exactly 1.0.
fn uniform_open(x: u64) -> f64 {
    ((x >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}
