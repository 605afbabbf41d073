use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::vocab::NOISE;

/// Replaces exactly `round(rate · len)` distinct positions of `ids` with
/// `<noise>`. The second value is the untouched input, which stays the
/// source of the training labels.
pub fn noise_input(ids: &[u32], rate: f64, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let rate = rate.clamp(0.0, 1.0);
    let k = (rate * ids.len() as f64).round() as usize;
    let mut noised = ids.to_vec();
    if k > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pos in index::sample(&mut rng, ids.len(), k) {
            noised[pos] = NOISE;
        }
    }
    (noised, ids.to_vec())
}

/// Seed for one sample's noise at one optimizer step. Independent of how
/// the step's samples are split into micro-batches.
pub fn sample_seed(stage_seed: u64, step: usize, sample_index: usize) -> u64 {
    let mut h = stage_seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [step as u64, sample_index as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}
