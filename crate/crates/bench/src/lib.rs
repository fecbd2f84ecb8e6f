//! Fixtures shared by the benchmarks.

use gebd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows × cols` features uniform in `[-1, 1)`.
pub fn random_features(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// Scores in `[0, 1)` with a smooth bump every 25 frames.
pub fn bumpy_scores(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|t| {
            let d = (t % 25) as f64 - 12.0;
            0.8 * (-d * d / 8.0).exp() + 0.2 * rng.random::<f64>()
        })
        .collect()
}
