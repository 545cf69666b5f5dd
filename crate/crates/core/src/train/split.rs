use rand::RngCore;

use crate::error::{invalid, Result};
use crate::seed;

/// Unbiased draw from `0..bound` by rejection on the raw 64-bit stream.
fn below(rng: &mut impl RngCore, bound: u64) -> u64 {
    let zone = u64::MAX - u64::MAX % bound;
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % bound;
        }
    }
}

/// Fisher–Yates, written out so the permutation only depends on the
/// ChaCha8 stream, not on a library's shuffle.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = seed::rng(seed);
    for i in (1..items.len()).rev() {
        let j = below(&mut rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    shuffle(&mut p, seed);
    p
}

/// Seeded shuffle, then the first `round(n·ratio)` indices train and the
/// rest validate.
pub fn split_dataset(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid!("split ratio must lie in (0, 1), got {ratio}"));
    }
    let p = permutation(n, seed);
    let cut = ((n as f64) * ratio).round() as usize;
    Ok((p[..cut].to_vec(), p[cut..].to_vec()))
}
