#![allow(dead_code)]

use dmtnet::{Element, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor<T: Element>(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(lo..hi)))
}

pub fn rand_image<T: Element>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    rand_tensor(&[1, 3, h, w], 0.0, 1.0, seed)
}

/// Adds uniform noise of half-width `amp` to every parameter.
pub fn jitter<T: Element>(store: &mut ParamStore<T>, amp: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in store.iter_mut() {
        for v in e.value.data_mut() {
            *v += T::of(rng.random_range(-amp..amp));
        }
    }
}

/// Sets every parameter whose name matches `pred` to zero.
pub fn zero_where<T: Element>(store: &mut ParamStore<T>, pred: impl Fn(&str) -> bool) {
    for e in store.iter_mut() {
        if pred(&e.name) {
            e.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

pub fn max_diff<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b).unwrap().to_f64_lossy()
}
