//! Counter-derived random streams.
//!
//! Every unit of parallel work gets its own ChaCha stream picked from the
//! master seed, so draws never depend on which worker ran the item.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for a two-level index (e.g. principal, sample).
pub fn stream_id(outer: usize, inner: usize) -> u64 {
    ((outer as u64) << 40) ^ inner as u64
}

pub fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let (l, h) = (lo.ln(), hi.ln());
    (l + (h - l) * rng.random::<f64>()).exp().clamp(lo, hi)
}
