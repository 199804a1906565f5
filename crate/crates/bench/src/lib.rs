//! Fixtures shared by the criterion benches.

use dgfnet_core::data::{sample_mixture, DataConfig};
use dgfnet_core::model::{Prepared, SpectralConfig};
use dgfnet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `n` prepared desk-scale 2-source mixtures.
pub fn desk_batch(n: usize) -> Vec<Prepared> {
    let data = DataConfig::default();
    let spectral = SpectralConfig::desk();
    (0..n)
        .map(|i| Prepared::new(sample_mixture(&data, 2, i as u64).expect("valid desk data"), &spectral).expect("valid desk grid"))
        .collect()
}
