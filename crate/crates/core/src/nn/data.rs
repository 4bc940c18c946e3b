//! Synthetic two-class image task: a horizontal bar (class 0) or a vertical
//! bar (class 1) at a random position, plus sparse positive noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NnError;
use crate::fixedpoint::{quantize_nearest, Fixed, QFormat};
use crate::sparse::{MaskedTensor, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Per-sample `[C, H, W]`.
    pub dims: [usize; 3],
    /// Row-major samples, `len() * C * H * W` values.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Samples `indices` quantized to nearest as one `[N, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize], fmt: QFormat) -> Result<(MaskedTensor, Vec<usize>), NnError> {
        let mut d: Vec<Fixed> = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            for &v in self.sample(i) {
                d.push(quantize_nearest(v, fmt)?);
            }
        }
        let [c, h, w] = self.dims;
        let t = MaskedTensor::from_dense(Shape::new(indices.len(), c, h, w), fmt, &d)?;
        Ok((t, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Splits off the last `count` samples.
    pub fn split_tail(mut self, count: usize) -> (Dataset, Dataset) {
        let keep = self.len().saturating_sub(count);
        let n = self.sample_len();
        let tail = Dataset {
            dims: self.dims,
            images: self.images.split_off(keep * n),
            labels: self.labels.split_off(keep),
        };
        (self, tail)
    }
}

/// `samples` single-channel `size x size` images with balanced labels.
///
/// Each image carries one bar of value 1.0 (two pixels thick when `size >= 6`),
/// and each background pixel is independently set to `U(0, noise)` with
/// probability 0.1.
pub fn two_class_bars(samples: usize, size: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thick = if size >= 6 { 2 } else { 1 };
    let mut images = Vec::with_capacity(samples * size * size);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % 2;
        let pos = rng.gen_range(0..=size - thick);
        for r in 0..size {
            for c in 0..size {
                let along = if label == 0 { r } else { c };
                let on_bar = along >= pos && along < pos + thick;
                let v = if on_bar {
                    1.0
                } else if rng.gen_bool(0.1) {
                    rng.gen_range(0.0..noise.max(f64::MIN_POSITIVE))
                } else {
                    0.0
                };
                images.push(v);
            }
        }
        labels.push(label);
    }
    Dataset { dims: [1, size, size], images, labels }
}

/// `samples` images of shape `dims` whose pixels are `U(0, 1)` with
/// probability `density` and zero otherwise; labels cycle through
/// `classes`.
pub fn random_images(dims: [usize; 3], samples: usize, classes: usize, density: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let images = (0..samples * n)
        .map(|_| if rng.gen_bool(density.clamp(0.0, 1.0)) { rng.gen_range(0.0..1.0) } else { 0.0 })
        .collect();
    let labels = (0..samples).map(|i| i % classes.max(1)).collect();
    Dataset { dims, images, labels }
}
