//! Seeded workloads shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsim::fixedpoint::{Fixed, QFormat};
use sparsim::sparse::{MaskedTensor, MaskedVector, Shape};

pub const FORMAT: QFormat = QFormat::Q4_16;

/// Values in `(-1, 1)` with the given fraction of non-zeros.
pub fn dense_values(len: usize, density: f64, seed: u64) -> Vec<Fixed> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let one = 1i64 << FORMAT.fl();
    (0..len)
        .map(|_| {
            let raw = if rng.gen_bool(density) { rng.gen_range(-one + 1..one).max(1) } else { 0 };
            Fixed::from_raw(raw, FORMAT).expect("in range")
        })
        .collect()
}

pub fn masked_vector(len: usize, density: f64, seed: u64) -> MaskedVector {
    MaskedVector::compress(&dense_values(len, density, seed), FORMAT)
}

pub fn masked_tensor(shape: Shape, density: f64, seed: u64) -> MaskedTensor {
    MaskedTensor::from_dense(shape, FORMAT, &dense_values(shape.len(), density, seed)).expect("shape matches")
}
