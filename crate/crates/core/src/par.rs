//! Data-parallel helpers shared by every Monte Carlo routine.
//!
//! Work is always split into a fixed set of indexed items, each of which owns
//! an RNG stream derived from `(master_seed, item index)`. Results are gathered
//! in index order and reduced sequentially, so the output is bit-identical
//! whether the items ran on one thread or many.
//!
//! With the `parallel` feature the items go through rayon; without it they run
//! in a plain loop. [`with_execution`] forces one mode for the current thread,
//! which is what the benches use to compare the two.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of Monte Carlo draws handled by a single work item.
pub const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

thread_local! {
    static OVERRIDE: Cell<Option<Execution>> = const { Cell::new(None) };
}

/// Runs `f` with the given execution mode forced on this thread.
pub fn with_execution<R>(mode: Execution, f: impl FnOnce() -> R) -> R {
    let prev = OVERRIDE.with(|c| c.replace(Some(mode)));
    let out = f();
    OVERRIDE.with(|c| c.set(prev));
    out
}

pub fn current_execution() -> Execution {
    OVERRIDE.with(|c| c.get()).unwrap_or_default()
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match current_execution() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Splits `draws` into [`CHUNK`]-sized items and evaluates `f(chunk_index, len)`.
pub fn map_chunks<T, F>(draws: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync + Send,
{
    let chunks = draws.div_ceil(CHUNK);
    map_indexed(chunks, |c| {
        let len = CHUNK.min(draws - c * CHUNK);
        f(c, len)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of stream keys into a child seed.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng_for(master: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, keys))
}

/// Pairwise summation; the split points depend only on the length.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and unbiased sample variance (two-pass, shifted by the first
/// element so constant input has exactly zero variance).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, f64::NAN);
    }
    let shift = xs[0];
    let d: Vec<f64> = xs.iter().map(|x| x - shift).collect();
    let md = pairwise_sum(&d) / n as f64;
    let sq: Vec<f64> = d.iter().map(|v| (v - md) * (v - md)).collect();
    (mean, pairwise_sum(&sq) / (n - 1) as f64)
}
