//! Execution mode switch for the data-parallel loops (Monte-Carlo estimates,
//! per-datum evaluation, replicate runs).
//!
//! Every parallel loop derives one RNG stream per item from a master seed, so
//! sequential and parallel execution produce bit-identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon work-stealing; degrades to sequential without the `parallel` feature.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// `(0..n).map(f)` under the requested execution mode, results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Independent RNG stream `stream` under master `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes two words into a fresh seed (splitmix64 finaliser).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn modes_agree() {
        let f = |i: usize| {
            let mut rng = rng_stream(17, i as u64);
            (0..100).map(|_| rng.random::<f64>()).sum::<f64>()
        };
        let a = map_indexed(Exec::Sequential, 64, f);
        let b = map_indexed(Exec::Parallel, 64, f);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ() {
        let a: u64 = rng_stream(1, 0).random();
        let b: u64 = rng_stream(1, 1).random();
        assert_ne!(a, b);
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
    }
}
