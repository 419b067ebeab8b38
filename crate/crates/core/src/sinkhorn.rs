//! Online mapping of predictions onto learnable prototypes.
//!
//! Scores are `aᵀŷ` (prototypes × pixels). A few Sinkhorn-Knopp sweeps turn
//! them into a balanced soft assignment `Q` (pixels × prototypes, rows sum
//! to one, prototypes share the pixels evenly), which then serves as a
//! gradient-free target for the softmax of the same scores.

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::rng::rng_from;

pub const DEFAULT_EPS: f64 = 0.05;
pub const DEFAULT_ITERS: usize = 3;
pub const DEFAULT_SMOOTHNESS: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SinkhornError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{name} must be positive and finite, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("sinkhorn diverged: {0}")]
    Diverged(String),
}

/// `dim × count` matrix whose columns are the prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatrix {
    dim: usize,
    count: usize,
    data: Vec<f64>,
}

impl PrototypeMatrix {
    /// Standard-normal entries, then unit-norm columns.
    pub fn random(dim: usize, count: usize, seed: u64) -> Self {
        assert!(count >= 2, "need at least two prototypes");
        let mut rng = rng_from(seed);
        let data = (0..dim * count).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut a = Self { dim, count, data };
        a.normalize_columns();
        a
    }

    pub fn from_vec(dim: usize, count: usize, data: Vec<f64>) -> Result<Self, SinkhornError> {
        if data.len() != dim * count || count < 2 {
            return Err(SinkhornError::DimensionMismatch(format!(
                "{} values for a {dim}x{count} prototype matrix",
                data.len()
            )));
        }
        Ok(Self { dim, count, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, count: dim, data }
    }

    /// Prediction channels (`2m - 1`).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of prototypes `d`.
    pub fn count(&self) -> usize {
        self.count
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.count + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column_norm(&self, col: usize) -> f64 {
        (0..self.dim).map(|r| self.get(r, col).powi(2)).sum::<f64>().sqrt()
    }

    /// Rescales every column to unit Euclidean norm (zero columns are left
    /// untouched).
    pub fn normalize_columns(&mut self) {
        for col in 0..self.count {
            let norm = self.column_norm(col);
            if norm > 1e-300 {
                for r in 0..self.dim {
                    self.data[r * self.count + col] /= norm;
                }
            }
        }
    }
}

/// `d × n` prototype scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    prototypes: usize,
    pixels: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn from_vec(prototypes: usize, pixels: usize, data: Vec<f64>) -> Result<Self, SinkhornError> {
        if data.len() != prototypes * pixels {
            return Err(SinkhornError::DimensionMismatch(format!(
                "{} values for {prototypes}x{pixels} scores",
                data.len()
            )));
        }
        Ok(Self {
            prototypes,
            pixels,
            data,
        })
    }

    pub fn prototypes(&self) -> usize {
        self.prototypes
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    #[inline]
    pub fn get(&self, proto: usize, pixel: usize) -> f64 {
        self.data[proto * self.pixels + pixel]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// `n × d` transport plan; row `p` is pixel `p`'s distribution over
/// prototypes. Produced outside any gradient path.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    pixels: usize,
    prototypes: usize,
    data: Vec<f64>,
}

impl AssignmentMatrix {
    pub fn from_vec(pixels: usize, prototypes: usize, data: Vec<f64>) -> Result<Self, SinkhornError> {
        if data.len() != prototypes * pixels {
            return Err(SinkhornError::DimensionMismatch(format!(
                "{} values for a {pixels}x{prototypes} assignment",
                data.len()
            )));
        }
        Ok(Self {
            pixels,
            prototypes,
            data,
        })
    }

    pub fn uniform(pixels: usize, prototypes: usize) -> Self {
        Self {
            pixels,
            prototypes,
            data: vec![1.0 / prototypes as f64; pixels * prototypes],
        }
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn prototypes(&self) -> usize {
        self.prototypes
    }

    #[inline]
    pub fn get(&self, pixel: usize, proto: usize) -> f64 {
        self.data[pixel * self.prototypes + proto]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows `start..start + len` as a flat slice.
    pub fn rows(&self, start: usize, len: usize) -> &[f64] {
        &self.data[start * self.prototypes..(start + len) * self.prototypes]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.prototypes)
            .map(|r| r.iter().sum())
            .collect()
    }

    /// Mean assignment per prototype.
    pub fn prototype_marginals(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.prototypes];
        for row in self.data.chunks_exact(self.prototypes) {
            for (acc, &v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.pixels as f64);
        m
    }
}

/// `aᵀŷ` for a flattened prediction `ŷ` of `a.dim()` channels × `pixels`.
pub fn compute_scores(a: &PrototypeMatrix, prediction: &[f64], pixels: usize) -> Result<ScoreMatrix, SinkhornError> {
    if prediction.len() != a.dim * pixels {
        return Err(SinkhornError::DimensionMismatch(format!(
            "prediction has {} values, expected {} channels x {pixels} pixels",
            prediction.len(),
            a.dim
        )));
    }
    let mut data = vec![0.0; a.count * pixels];
    for c in 0..a.dim {
        let row = &prediction[c * pixels..(c + 1) * pixels];
        for k in 0..a.count {
            let weight = a.get(c, k);
            if weight == 0.0 {
                continue;
            }
            for (s, &y) in data[k * pixels..(k + 1) * pixels].iter_mut().zip(row) {
                *s += weight * y;
            }
        }
    }
    Ok(ScoreMatrix {
        prototypes: a.count,
        pixels,
        data,
    })
}

/// Gradients of a loss through `scores = aᵀŷ`, given `∂L/∂scores`.
///
/// Returns `(∂L/∂a, ∂L/∂ŷ)` in the layouts of [`PrototypeMatrix`] and the
/// flattened prediction.
pub fn scores_backward(
    a: &PrototypeMatrix,
    prediction: &[f64],
    grad_scores: &[f64],
    pixels: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut grad_a = vec![0.0; a.dim * a.count];
    let mut grad_y = vec![0.0; a.dim * pixels];
    for c in 0..a.dim {
        let y = &prediction[c * pixels..(c + 1) * pixels];
        let gy = &mut grad_y[c * pixels..(c + 1) * pixels];
        for k in 0..a.count {
            let gs = &grad_scores[k * pixels..(k + 1) * pixels];
            grad_a[c * a.count + k] = gs.iter().zip(y).map(|(g, v)| g * v).sum();
            let weight = a.get(c, k);
            for (o, &g) in gy.iter_mut().zip(gs) {
                *o += weight * g;
            }
        }
    }
    (grad_a, grad_y)
}

fn check_positive(name: &'static str, value: f64) -> Result<(), SinkhornError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(SinkhornError::InvalidParameter { name, value })
    }
}

/// Balanced assignment by Sinkhorn-Knopp.
///
/// Works on `P = exp(scores / eps)` laid out prototypes × pixels: normalise
/// to total mass one, then `niters` rounds of scaling prototype rows to mass
/// `1/d` and pixel columns to mass `1/n`; finally every pixel column is
/// normalised and the plan transposed so each pixel's row sums to one.
///
/// Each pixel's scores are shifted by their maximum before exponentiation.
/// The shift is a per-column factor that the column normalisations cancel,
/// so the result is unchanged while `exp` stays in range.
pub fn sinkhorn(scores: &ScoreMatrix, eps: f64, niters: usize) -> Result<AssignmentMatrix, SinkhornError> {
    check_positive("eps", eps)?;
    let (d, n) = (scores.prototypes, scores.pixels);
    if d == 0 || n == 0 {
        return Err(SinkhornError::DimensionMismatch("empty score matrix".into()));
    }
    if let Some(bad) = scores.data.iter().find(|v| !v.is_finite()) {
        return Err(SinkhornError::Diverged(format!("non-finite score {bad}")));
    }
    let mut col_max = vec![f64::NEG_INFINITY; n];
    for row in scores.data.chunks_exact(n) {
        for (m, &v) in col_max.iter_mut().zip(row) {
            *m = m.max(v);
        }
    }
    let mut p: Vec<f64> = scores
        .data
        .chunks_exact(n)
        .flat_map(|row| row.iter().zip(&col_max).map(|(&s, &m)| ((s - m) / eps).exp()))
        .collect();

    let total: f64 = p.iter().sum();
    scale_all(&mut p, 1.0 / total, "total mass")?;

    let r = 1.0 / d as f64;
    let c = 1.0 / n as f64;
    let mut col_sum = vec![0.0; n];
    for _ in 0..niters {
        for row in p.chunks_exact_mut(n) {
            let u: f64 = row.iter().sum();
            scale_all(row, r / u, "prototype row")?;
        }
        column_sums(&p, n, &mut col_sum);
        for row in p.chunks_exact_mut(n) {
            for (v, &s) in row.iter_mut().zip(&col_sum) {
                *v *= c / s;
            }
        }
    }
    column_sums(&p, n, &mut col_sum);
    let mut q = vec![0.0; n * d];
    for (k, row) in p.chunks_exact(n).enumerate() {
        for (j, (&v, &s)) in row.iter().zip(&col_sum).enumerate() {
            q[j * d + k] = v / s;
        }
    }
    if let Some(bad) = q.iter().find(|v| !v.is_finite()) {
        return Err(SinkhornError::Diverged(format!("assignment entry {bad}")));
    }
    Ok(AssignmentMatrix {
        pixels: n,
        prototypes: d,
        data: q,
    })
}

fn scale_all(values: &mut [f64], factor: f64, what: &str) -> Result<(), SinkhornError> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(SinkhornError::Diverged(format!("{what} scaling factor {factor}")));
    }
    values.iter_mut().for_each(|v| *v *= factor);
    Ok(())
}

fn column_sums(p: &[f64], n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for row in p.chunks_exact(n) {
        for (acc, &v) in out.iter_mut().zip(row) {
            *acc += v;
        }
    }
}

/// Swapped-assignment loss `-(1/n) Σ_p Σ_k Q[p,k] log softmax_k(scores[:,p] / w)`
/// and its gradient with respect to the scores (`Q` held fixed).
pub fn mapping_loss_with_grad(
    scores: &ScoreMatrix,
    q: &AssignmentMatrix,
    smoothness: f64,
) -> Result<(f64, Vec<f64>), SinkhornError> {
    check_positive("w", smoothness)?;
    let (d, n) = (scores.prototypes, scores.pixels);
    if q.prototypes != d || q.pixels != n {
        return Err(SinkhornError::DimensionMismatch(format!(
            "scores are {d}x{n}, assignment is {}x{}",
            q.pixels, q.prototypes
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; d * n];
    let mut logits = vec![0.0; d];
    let inv = 1.0 / (n as f64 * smoothness);
    for j in 0..n {
        for (k, l) in logits.iter_mut().enumerate() {
            *l = scores.get(k, j) / smoothness;
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let q_row = &q.data[j * d..(j + 1) * d];
        let q_mass: f64 = q_row.iter().sum();
        for k in 0..d {
            let log_p = logits[k] - lse;
            loss -= q_row[k] * log_p;
            grad[k * n + j] = (q_mass * log_p.exp() - q_row[k]) * inv;
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn mapping_loss(scores: &ScoreMatrix, q: &AssignmentMatrix, smoothness: f64) -> Result<f64, SinkhornError> {
    mapping_loss_with_grad(scores, q, smoothness).map(|(l, _)| l)
}

/// Class prototype vectors `â_c = Σ_p ŷ_c[p] Q[p, :]` for one sample.
///
/// `prediction` is `channels × pixels`; `q_rows` are that sample's `pixels`
/// rows of the batch assignment (`pixels × d`).
pub fn aggregate_prototype_vectors(prediction: &[f64], channels: usize, q_rows: &[f64], d: usize) -> Vec<Vec<f64>> {
    let pixels = prediction.len() / channels;
    assert_eq!(q_rows.len(), pixels * d, "assignment rows do not match the prediction");
    (0..channels)
        .map(|c| {
            let mut v = vec![0.0; d];
            for (p, &y) in prediction[c * pixels..(c + 1) * pixels].iter().enumerate() {
                if y != 0.0 {
                    for (acc, &qv) in v.iter_mut().zip(&q_rows[p * d..(p + 1) * d]) {
                        *acc += y * qv;
                    }
                }
            }
            v
        })
        .collect()
}

/// Back-propagates `∂L/∂â_c` to `∂L/∂ŷ_c[p] = Σ_k Q[p,k] ∂L/∂â_c[k]`.
pub fn aggregate_backward(grad_vectors: &[Vec<f64>], q_rows: &[f64], d: usize) -> Vec<f64> {
    let pixels = q_rows.len() / d;
    let mut out = vec![0.0; grad_vectors.len() * pixels];
    for (c, g) in grad_vectors.iter().enumerate() {
        for p in 0..pixels {
            out[c * pixels + p] = q_rows[p * d..(p + 1) * d].iter().zip(g).map(|(q, g)| q * g).sum();
        }
    }
    out
}
