//! Inputs shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tscmamba::dataio::SeriesBatch;
use tscmamba::params::init;
use tscmamba::Tensor;

/// Random series batch of shape `[b, d, l]` with labels cycling over `classes`.
pub fn series(b: usize, d: usize, l: usize, classes: usize, seed: u64) -> SeriesBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = init::uniform(&mut rng, &[b, d, l], 1.0);
    SeriesBatch::new(values, (0..b).map(|i| i % classes).collect(), classes).unwrap()
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    init::uniform(&mut ChaCha8Rng::seed_from_u64(seed), shape, 1.0)
}
