//! Helpers shared by the integration tests.
#![allow(dead_code)]

use medcl_core::grid::Planes;
use medcl_core::phantom::{generate_split, PhantomSample, PhantomSpec};
use medcl_core::rng::{rng_from, Rng};
use medcl_core::trainer::TrainData;
use rand::Rng as _;

/// Relative error with a small floor so that two near-zero values agree.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Five-point central difference of `f` along coordinate `i`.
pub fn numeric_partial(f: &impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    let mut at = |t: f64| {
        probe[i] = x[i] + t;
        f(&probe)
    };
    (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
}

/// Largest relative error between `grad` and numeric partials of `f` over
/// the coordinates `coords` of `x`.
pub fn fd_max_err(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], coords: &[usize], h: f64) -> f64 {
    coords
        .iter()
        .map(|&i| rel_err(grad[i], numeric_partial(&f, x, i, h)))
        .fold(0.0, f64::max)
}

pub fn uniform_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random softmax planes: `m + 1` channels summing to one per pixel.
pub fn random_softmax(m: usize, h: usize, w: usize, seed: u64) -> Planes {
    let mut rng = rng_from(seed);
    let n = h * w;
    let mut data = vec![0.0; (m + 1) * n];
    for p in 0..n {
        let raw: Vec<f64> = (0..=m).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (c, v) in raw.iter().enumerate() {
            data[c * n + p] = v / s;
        }
    }
    Planes::from_vec(m + 1, h, w, data).unwrap()
}

/// Random `(2m - 1)`-channel prediction with entries in (0.05, 0.95).
pub fn random_prediction(m: usize, h: usize, w: usize, seed: u64) -> Planes {
    let mut rng = rng_from(seed);
    let data = uniform_vec(&mut rng, (2 * m - 1) * h * w, 0.05, 0.95);
    Planes::from_vec(2 * m - 1, h, w, data).unwrap()
}

/// A small phantom dataset: `train` training and `val` validation images.
pub fn toy_data(m: usize, size: usize, train: usize, val: usize, seed: u64) -> TrainData {
    let spec = PhantomSpec {
        height: size,
        width: size,
        num_classes: m,
        ..PhantomSpec::default()
    };
    let take = |split: usize, n: usize| -> Vec<PhantomSample> {
        generate_split(&spec, seed, split, n)
            .unwrap()
            .into_iter()
            .map(|(_, s)| s)
            .collect()
    };
    TrainData {
        train: take(0, train),
        val: take(1, val),
        num_classes: m,
    }
}
