//! Seeded random sources.
//!
//! Every stochastic routine takes a `u64` seed and draws from ChaCha20
//! (`rand_chacha::ChaCha20Rng`), a counter-based generator with a 64-bit
//! block counter and a 64-bit stream id. The seed is expanded with
//! `SeedableRng::seed_from_u64`, so a given seed produces the same stream on
//! every platform. Independent sub-streams (one per sampling chain, for
//! example) are selected with [`substream`], which keeps the key and changes
//! only the stream id.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub type Rng = ChaCha20Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = seeded(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| normal(rng)).collect()
}

#[inline]
pub fn uniform(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

/// Uniformly shuffled `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = normal_vec(&mut seeded(7), 16);
        let b = normal_vec(&mut seeded(7), 16);
        assert_eq!(a, b);
    }

    #[test]
    fn substreams_differ() {
        let a = normal_vec(&mut substream(7, 0), 8);
        let b = normal_vec(&mut substream(7, 1), 8);
        assert_ne!(a, b);
    }

    #[test]
    fn permutation_is_permutation() {
        let mut p = permutation(&mut seeded(3), 50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
