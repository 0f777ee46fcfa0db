//! Mixup: convex combination of a batch with a shuffled copy of itself,
//! applied to both inputs and one-hot labels.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::tensor::{Element, Tensor};

pub struct MixupBatch<T: Element> {
    pub inputs: Tensor<T>,
    /// Soft labels, `[B, K]` row-major.
    pub targets: Vec<T>,
    pub lambda: f64,
}

/// Deterministic core: mix `x` with `x[perm]` at a fixed coefficient.
pub fn mixup_with_lambda<T: Element>(
    x_data: &[T],
    x_shape: &[usize],
    y_onehot: &[T],
    num_classes: usize,
    lambda: f64,
    perm: &[usize],
) -> MixupBatch<T> {
    let batch = x_shape[0];
    let sample = x_data.len() / batch.max(1);
    let lam = T::from_f64(lambda);
    let inv = T::from_f64(1.0 - lambda);

    let mut mixed = vec![T::zero(); x_data.len()];
    for b in 0..batch {
        let src = &x_data[b * sample..(b + 1) * sample];
        let other = &x_data[perm[b] * sample..(perm[b] + 1) * sample];
        let dst = &mut mixed[b * sample..(b + 1) * sample];
        for ((d, &a), &o) in dst.iter_mut().zip(src).zip(other) {
            *d = lam * a + inv * o;
        }
    }
    let mut targets = vec![T::zero(); batch * num_classes];
    for b in 0..batch {
        for k in 0..num_classes {
            targets[b * num_classes + k] =
                lam * y_onehot[b * num_classes + k] + inv * y_onehot[perm[b] * num_classes + k];
        }
    }
    MixupBatch {
        inputs: Tensor::from_vec(mixed, x_shape).expect("shape preserved"),
        targets,
        lambda,
    }
}

/// Sample `lambda ~ Beta(alpha, alpha)` and a batch permutation, then mix.
/// Batches smaller than two pass through unchanged (`lambda = 1`).
pub fn mixup_batch<T: Element, R: Rng>(
    x_data: &[T],
    x_shape: &[usize],
    y_onehot: &[T],
    num_classes: usize,
    alpha: f64,
    rng: &mut R,
) -> MixupBatch<T> {
    let batch = x_shape[0];
    if batch < 2 {
        let identity: Vec<usize> = (0..batch).collect();
        return mixup_with_lambda(x_data, x_shape, y_onehot, num_classes, 1.0, &identity);
    }
    let beta = Beta::new(alpha, alpha).expect("alpha > 0");
    let lambda: f64 = beta.sample(rng);
    let mut perm: Vec<usize> = (0..batch).collect();
    perm.shuffle(rng);
    mixup_with_lambda(x_data, x_shape, y_onehot, num_classes, lambda, &perm)
}
