//! Training losses.
//!
//! Unsupervised: mix consistency, prototype cluster loss, anatomy
//! consistency (plus the swapped-assignment mapping loss from
//! [`crate::sinkhorn`], aggregated here). Supervised: scribble
//! cross-entropy/Dice on annotated pixels and the image-level category
//! loss. Every differentiable loss has a `_with_grad` form returning exact
//! gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{LabelMap, Planes};
use crate::mixing::SubsetSchedule;
use crate::phantom::UNLABELED;

/// Norms below this make a cosine undefined; it is taken as 0.
pub const NORM_GUARD: f64 = 1e-12;
/// Floor applied to probabilities inside `log`.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_TAU: f64 = 0.1;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity and its gradients with respect to both arguments.
pub fn cosine_with_grad(z1: &[f64], z2: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    assert_eq!(z1.len(), z2.len());
    let n1 = dot(z1, z1).sqrt();
    let n2 = dot(z2, z2).sqrt();
    if n1 < NORM_GUARD || n2 < NORM_GUARD {
        return (0.0, vec![0.0; z1.len()], vec![0.0; z2.len()]);
    }
    let cos = dot(z1, z2) / (n1 * n2);
    let inv = 1.0 / (n1 * n2);
    let g1 = z1.iter().zip(z2).map(|(a, b)| b * inv - cos * a / (n1 * n1)).collect();
    let g2 = z1.iter().zip(z2).map(|(a, b)| a * inv - cos * b / (n2 * n2)).collect();
    (cos, g1, g2)
}

pub fn cosine(z1: &[f64], z2: &[f64]) -> f64 {
    let n1 = dot(z1, z1).sqrt();
    let n2 = dot(z2, z2).sqrt();
    if n1 < NORM_GUARD || n2 < NORM_GUARD {
        0.0
    } else {
        dot(z1, z2) / (n1 * n2)
    }
}

/// `-(z1·z2) / (‖z1‖ ‖z2‖)`, or 0 when either norm is below [`NORM_GUARD`].
pub fn neg_cos(z1: &[f64], z2: &[f64]) -> f64 {
    -cosine(z1, z2)
}

pub fn neg_cos_with_grad(z1: &[f64], z2: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (c, g1, g2) = cosine_with_grad(z1, z2);
    (
        -c,
        g1.into_iter().map(|g| -g).collect(),
        g2.into_iter().map(|g| -g).collect(),
    )
}

/// How the mix-consistency similarity is taken over the prediction tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSimilarity {
    /// One cosine over the whole flattened tensor.
    #[default]
    Global,
    /// Mean of per-channel cosines.
    PerChannel,
}

/// Mix consistency value with gradients for the prediction and the target.
/// Callers that detach the target simply drop the second gradient.
pub fn mix_consistency_loss_with_grad(
    pred: &Planes,
    target: &Planes,
    mode: MixSimilarity,
) -> (f64, Vec<f64>, Vec<f64>) {
    assert!(pred.same_shape(target), "prediction and mix target differ in shape");
    match mode {
        MixSimilarity::Global => neg_cos_with_grad(pred.data(), target.data()),
        MixSimilarity::PerChannel => {
            let c = pred.channels();
            let n = pred.plane_len();
            let mut value = 0.0;
            let mut gp = vec![0.0; c * n];
            let mut gt = vec![0.0; c * n];
            for ch in 0..c {
                let (v, a, b) = neg_cos_with_grad(pred.plane(ch), target.plane(ch));
                value += v / c as f64;
                for (o, g) in gp[ch * n..(ch + 1) * n].iter_mut().zip(a) {
                    *o = g / c as f64;
                }
                for (o, g) in gt[ch * n..(ch + 1) * n].iter_mut().zip(b) {
                    *o = g / c as f64;
                }
            }
            (value, gp, gt)
        }
    }
}

pub fn mix_consistency_loss(pred: &Planes, target: &Planes, mode: MixSimilarity) -> f64 {
    mix_consistency_loss_with_grad(pred, target, mode).0
}

/// Cluster loss over per-sample class prototypes `vectors[b][i]` (`B × m`,
/// each `d`-dimensional) with temperature `tau`.
///
/// With batch centres `c_i = mean_b v_i^b`, compactness
/// `C = Σ_{b,i} exp(cos(v_i^b, c_i)/τ)` and discriminability
/// `D = Σ_{i≠j} exp(cos(c_i, c_j)/τ)`, the loss is `-log(C / (C + D))`.
/// Returns the value and `∂L/∂v_i^b` in the same nesting.
pub fn cluster_loss_with_grad(vectors: &[Vec<Vec<f64>>], tau: f64) -> (f64, Vec<Vec<Vec<f64>>>) {
    let batch = vectors.len();
    assert!(batch >= 1, "cluster loss needs at least one sample");
    let classes = vectors[0].len();
    let d = vectors[0].first().map_or(0, Vec::len);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|i| {
            let mut c = vec![0.0; d];
            for sample in vectors {
                for (acc, v) in c.iter_mut().zip(&sample[i]) {
                    *acc += v / batch as f64;
                }
            }
            c
        })
        .collect();

    let mut compact_terms = Vec::with_capacity(batch * classes);
    let mut compact = 0.0;
    for (b, sample) in vectors.iter().enumerate() {
        for (i, v) in sample.iter().enumerate() {
            let (cos, gv, gc) = cosine_with_grad(v, &centers[i]);
            let e = (cos / tau).exp();
            compact += e;
            compact_terms.push((b, i, e, gv, gc));
        }
    }
    let mut disc_terms = Vec::new();
    let mut disc = 0.0;
    for i in 0..classes {
        for j in 0..classes {
            if i != j {
                let (cos, gi, gj) = cosine_with_grad(&centers[i], &centers[j]);
                let e = (cos / tau).exp();
                disc += e;
                disc_terms.push((i, j, e, gi, gj));
            }
        }
    }
    let value = (1.0 + disc / compact).ln();

    let d_compact = -disc / (compact * (compact + disc));
    let d_disc = 1.0 / (compact + disc);
    let mut grad: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; d]; classes]; batch];
    let mut grad_centers = vec![vec![0.0; d]; classes];
    for (b, i, e, gv, gc) in compact_terms {
        let s = d_compact * e / tau;
        for (o, g) in grad[b][i].iter_mut().zip(gv) {
            *o += s * g;
        }
        for (o, g) in grad_centers[i].iter_mut().zip(gc) {
            *o += s * g;
        }
    }
    for (i, j, e, gi, gj) in disc_terms {
        let s = d_disc * e / tau;
        for (o, g) in grad_centers[i].iter_mut().zip(gi) {
            *o += s * g;
        }
        for (o, g) in grad_centers[j].iter_mut().zip(gj) {
            *o += s * g;
        }
    }
    for sample in grad.iter_mut() {
        for (gi, gc) in sample.iter_mut().zip(&grad_centers) {
            for (o, g) in gi.iter_mut().zip(gc) {
                *o += g / batch as f64;
            }
        }
    }
    (value, grad)
}

pub fn cluster_loss(vectors: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    cluster_loss_with_grad(vectors, tau).0
}

fn subset_sum(rows: impl Fn(usize) -> Vec<f64>, subset: &[u8], len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for &class in subset {
        for (a, v) in acc.iter_mut().zip(rows(class as usize - 1)) {
            *a += v;
        }
    }
    acc
}

/// Segmentation half of the anatomy-consistency loss:
/// `Σ_k neg_cos(ŷ_{Ω_k}, Σ_{i∈Ω_k} ŷ_i)` over the combined channels.
/// `pred` has `2m - 1` channels. Returns the value and `∂L/∂pred`.
pub fn ac_segmentation_term_with_grad(pred: &Planes, schedule: &SubsetSchedule) -> (f64, Vec<f64>) {
    let m = schedule.num_classes();
    assert_eq!(pred.channels(), 2 * m - 1, "prediction must have 2m-1 channels");
    let n = pred.plane_len();
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.data().len()];
    for (channel, subset) in schedule.combined() {
        let sum = subset_sum(|c| pred.plane(c).to_vec(), subset, n);
        let (v, g_comb, g_sum) = neg_cos_with_grad(pred.plane(channel), &sum);
        value += v;
        for (o, g) in grad[channel * n..(channel + 1) * n].iter_mut().zip(&g_comb) {
            *o += g;
        }
        for &class in subset {
            let c = class as usize - 1;
            for (o, g) in grad[c * n..(c + 1) * n].iter_mut().zip(&g_sum) {
                *o += g;
            }
        }
    }
    (value, grad)
}

/// Prototype half of the anatomy-consistency loss on `2m - 1` class
/// prototype vectors. Returns the value and per-vector gradients.
pub fn ac_prototype_term_with_grad(protos: &[Vec<f64>], schedule: &SubsetSchedule) -> (f64, Vec<Vec<f64>>) {
    let m = schedule.num_classes();
    assert_eq!(protos.len(), 2 * m - 1, "need one prototype vector per channel");
    let d = protos[0].len();
    let mut value = 0.0;
    let mut grad = vec![vec![0.0; d]; protos.len()];
    for (channel, subset) in schedule.combined() {
        let sum = subset_sum(|c| protos[c].clone(), subset, d);
        let (v, g_comb, g_sum) = neg_cos_with_grad(&protos[channel], &sum);
        value += v;
        for (o, g) in grad[channel].iter_mut().zip(&g_comb) {
            *o += g;
        }
        for &class in subset {
            for (o, g) in grad[class as usize - 1].iter_mut().zip(&g_sum) {
                *o += g;
            }
        }
    }
    (value, grad)
}

/// Full anatomy-consistency loss for one prediction and its prototypes.
pub fn anatomy_consistency_loss(pred: &Planes, protos: &[Vec<f64>], schedule: &SubsetSchedule) -> f64 {
    ac_segmentation_term_with_grad(pred, schedule).0 + ac_prototype_term_with_grad(protos, schedule).0
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScribbleLoss {
    /// Mean over annotated pixels; 0 when there are none.
    pub value: f64,
    /// `∂value/∂probs`, laid out like the probability planes.
    pub grad: Vec<f64>,
    pub annotated: usize,
    pub no_supervision: bool,
}

/// Partial cross-entropy plus soft Dice on annotated pixels.
///
/// `probs` holds the softmax head (background + m classes). At an annotated
/// pixel with class `c` the one-hot target zeroes every other class, so the
/// pixel contributes `-(log ŷ_c + 2 ŷ_c / (1 + ŷ_c))`.
pub fn scribble_loss(probs: &Planes, scribbles: &LabelMap) -> ScribbleLoss {
    let n = probs.plane_len();
    assert_eq!(scribbles.len(), n, "scribble map and prediction differ in size");
    let annotated: Vec<(usize, usize)> = scribbles
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s != UNLABELED)
        .map(|(p, &s)| (p, s as usize))
        .collect();
    let mut grad = vec![0.0; probs.data().len()];
    if annotated.is_empty() {
        return ScribbleLoss {
            value: 0.0,
            grad,
            annotated: 0,
            no_supervision: true,
        };
    }
    let count = annotated.len() as f64;
    let mut value = 0.0;
    for (p, c) in annotated.iter().copied() {
        assert!(c < probs.channels(), "scribble class {c} outside the prediction");
        let y = probs.plane(c)[p];
        let (log_term, dlog) = if y > PROB_FLOOR {
            (y.ln(), 1.0 / y)
        } else {
            (PROB_FLOOR.ln(), 0.0)
        };
        value -= log_term + 2.0 * y / (1.0 + y);
        grad[c * n + p] = -(dlog + 2.0 / ((1.0 + y) * (1.0 + y))) / count;
    }
    ScribbleLoss {
        value: value / count,
        grad,
        annotated: annotated.len(),
        no_supervision: false,
    }
}

/// Image-level loss `mean_p -log(p_bg + Σ_{i∈Ψ} p_i)`; returns the value and
/// `∂L/∂probs`.
pub fn category_loss_with_grad(probs: &Planes, present: &[u8]) -> (f64, Vec<f64>) {
    let n = probs.plane_len();
    let mut allowed = vec![false; probs.channels()];
    allowed[0] = true;
    for &c in present {
        allowed[c as usize] = true;
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; probs.data().len()];
    for p in 0..n {
        let mass: f64 = (0..probs.channels())
            .filter(|&c| allowed[c])
            .map(|c| probs.plane(c)[p])
            .sum();
        if mass > PROB_FLOOR {
            value -= mass.ln();
            for c in (0..probs.channels()).filter(|&c| allowed[c]) {
                grad[c * n + p] = -1.0 / (mass * n as f64);
            }
        } else {
            value -= PROB_FLOOR.ln();
        }
    }
    (value / n as f64, grad)
}

pub fn category_loss(probs: &Planes, present: &[u8]) -> f64 {
    category_loss_with_grad(probs, present).0
}

/// Per-term weights; 0 switches a term off entirely.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mix: f64,
    pub cluster: f64,
    pub ac: f64,
    pub map: f64,
    pub scribble: f64,
    pub category: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        Self {
            mix: w,
            cluster: w,
            ac: w,
            map: w,
            scribble: w,
            category: w,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.mix, self.cluster, self.ac, self.map, self.scribble, self.category]
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, w) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LossError::InvalidWeight { term: name, value: w });
            }
        }
        Ok(())
    }

    pub fn any_unsupervised(&self) -> bool {
        self.mix > 0.0 || self.cluster > 0.0 || self.ac > 0.0 || self.map > 0.0
    }

    pub fn needs_assignment(&self) -> bool {
        self.cluster > 0.0 || self.ac > 0.0 || self.map > 0.0
    }
}

pub const TERM_NAMES: [&str; 6] = ["l_mix", "l_cluster", "l_ac", "l_map", "l_scribble", "l_category"];

/// Raw (unweighted) term values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_mix: f64,
    pub l_cluster: f64,
    pub l_ac: f64,
    pub l_map: f64,
    pub l_scribble: f64,
    pub l_category: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 6] {
        [
            self.l_mix,
            self.l_cluster,
            self.l_ac,
            self.l_map,
            self.l_scribble,
            self.l_category,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mix: f64,
    pub l_cluster: f64,
    pub l_ac: f64,
    pub l_map: f64,
    pub l_scribble: f64,
    pub l_category: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            l_mix: self.l_mix,
            l_cluster: self.l_cluster,
            l_ac: self.l_ac,
            l_map: self.l_map,
            l_scribble: self.l_scribble,
            l_category: self.l_category,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss diverged: {term} = {value}")]
    Diverged { term: &'static str, value: f64 },
    #[error("loss weight for {term} must be finite and non-negative, got {value}")]
    InvalidWeight { term: &'static str, value: f64 },
}

/// Weighted sum of the six terms.
pub fn total_loss(terms: LossTerms, weights: LossWeights) -> Result<LossBreakdown, LossError> {
    weights.validate()?;
    let values = terms.as_array();
    for (name, v) in TERM_NAMES.iter().zip(values) {
        if !v.is_finite() {
            return Err(LossError::Diverged { term: name, value: v });
        }
    }
    let total = values.iter().zip(weights.as_array()).map(|(v, w)| v * w).sum();
    Ok(LossBreakdown {
        l_mix: terms.l_mix,
        l_cluster: terms.l_cluster,
        l_ac: terms.l_ac,
        l_map: terms.l_map,
        l_scribble: terms.l_scribble,
        l_category: terms.l_category,
        total,
        weights,
    })
}
