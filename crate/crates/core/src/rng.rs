//! Seed derivation.
//!
//! Every stochastic unit of work (a matrix entry, a Monte Carlo block, a
//! survey trial) draws from its own ChaCha stream whose seed is derived from
//! a base seed and a path of integer tags. Results are therefore independent
//! of scheduling and of how many sibling units exist.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a path of tags.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(seed), |acc, &tag| splitmix(acc ^ splitmix(tag.wrapping_add(GOLDEN))))
}

/// Hash a string label into a tag usable in [`derive_seed`] paths.
pub fn label_tag(label: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, path))
}

/// The first `n` entries of a uniformly random permutation of `0..len`,
/// by a Fisher–Yates shuffle that stops after `n` steps. The same stream
/// yields nested samples for different `n`, so measurements at nearby
/// sample sizes share most of their draws.
pub fn permutation_prefix<R: Rng + ?Sized>(rng: &mut R, len: usize, n: usize) -> Vec<usize> {
    let mut moved: HashMap<usize, usize> = HashMap::with_capacity(2 * n);
    (0..n)
        .map(|k| {
            let j = rng.random_range(k..len);
            let at_j = moved.get(&j).copied().unwrap_or(j);
            let at_k = moved.get(&k).copied().unwrap_or(k);
            moved.insert(j, at_k);
            at_j
        })
        .collect()
}
