//! Seeded fixtures shared by the kernel benchmarks.

use agglo_core::distill::{StudentConfig, StudentModel};
use agglo_core::synth::{corpus, ImageSource};
use agglo_core::{FeatureMap, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

/// `A Aᵀ` for a random `n × n` matrix `A`.
pub fn spd_matrix(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    a.matmul(&a.transpose()).unwrap()
}

/// Flat `n × c` token buffer with correlated channels.
pub fn correlated_tokens(n: usize, c: usize, seed: u64) -> Vec<f64> {
    let mix = spd_matrix(c, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    (0..n)
        .flat_map(|_| {
            let z: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            mix.mul_vec(&z)
        })
        .collect()
}

pub fn image(res: usize, seed: u64) -> FeatureMap {
    corpus(seed, 1)[0].render(res).unwrap()
}

/// Default student with adaptors for two 8-channel teachers and one 16-channel teacher.
pub fn student(seed: u64) -> StudentModel {
    let teachers = [("clip".to_string(), 8), ("dino".to_string(), 8), ("sam".to_string(), 16)];
    StudentModel::new(StudentConfig::default(), &teachers, seed).unwrap()
}
