#![allow(dead_code)]

use asl2pet::nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, tiny)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

pub fn corpus(n_paired: usize, n_unpaired: usize, size: usize, seed: u64) -> (tempfile::TempDir, asl2pet::datasets::DatasetHandle) {
    let dir = tempfile::tempdir().unwrap();
    let opts = asl2pet::phantoms::CorpusOptions {
        height: size,
        width: size,
        ..Default::default()
    };
    let (_, path) = asl2pet::phantoms::generate_corpus(n_paired, n_unpaired, seed, dir.path(), &opts).unwrap();
    let handle = asl2pet::datasets::load_manifest(&path).unwrap();
    (dir, handle)
}

pub fn tiny_model() -> asl2pet::model::ModelConfig {
    asl2pet::model::ModelConfig {
        base_channels: 4,
        ..Default::default()
    }
}
