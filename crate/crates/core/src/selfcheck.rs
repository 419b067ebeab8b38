//! Fast built-in correctness checks: Sinkhorn oracles, gradient checks, mix
//! identities, the anatomy-consistency fixed point and metric oracles.
//!
//! Each check is independent and reports pass/fail with a short detail
//! line. A fault can be injected to prove that a broken component is caught.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::evalkit::{dice, hausdorff, Mask};
use crate::grid::{Image, LabelMap, Planes};
use crate::losses::{
    ac_prototype_term_with_grad, ac_segmentation_term_with_grad, anatomy_consistency_loss, category_loss_with_grad,
    cluster_loss_with_grad, mix_consistency_loss_with_grad, scribble_loss, MixSimilarity,
};
use crate::mixing::{inter_mix, intra_mix, sample_bbox, sample_subsets, BoundingBoxMask, MixProvenance, MixedSample};
use crate::phantom::UNLABELED;
use crate::rng::{rng_from, Rng};
use crate::sinkhorn::{
    aggregate_prototype_vectors, mapping_loss, mapping_loss_with_grad, sinkhorn, ScoreMatrix, DEFAULT_ITERS,
};

/// Deliberate breakage used to test that the checks catch real faults.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Rescales one assignment row after Sinkhorn, as a broken final
    /// normalisation would.
    SinkhornNormalization,
}

impl std::str::FromStr for Fault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sinkhorn-normalization" => Ok(Self::SinkhornNormalization),
            other => Err(format!("unknown fault {other:?} (known: sinkhorn-normalization)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfcheckReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl SelfcheckReport {
    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Outcome = Result<String, String>;

/// Runs every check.
pub fn run(fault: Option<Fault>) -> SelfcheckReport {
    let checks: [(&str, &dyn Fn() -> Outcome); 9] = [
        ("row-stochasticity", &|| row_stochasticity(fault)),
        ("prototype-marginals", &prototype_marginals),
        ("near-permutation", &near_permutation),
        ("loss-gradients", &loss_gradients),
        ("mix-identities", &mix_identities),
        ("anatomy-fixed-point", &anatomy_fixed_point),
        ("dice-oracle", &dice_oracle),
        ("hausdorff-oracle", &hausdorff_oracle),
        ("metric-analytic", &metric_analytic),
    ];
    let checks: Vec<CheckResult> = checks
        .iter()
        .map(|(name, check)| {
            let started = Instant::now();
            let outcome = check();
            let seconds = started.elapsed().as_secs_f64();
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name: name.to_string(),
                passed,
                detail,
                seconds,
            }
        })
        .collect();
    let passed = checks.iter().all(|c| c.passed);
    SelfcheckReport { checks, passed }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn random_scores(rng: &mut Rng, d: usize, n: usize, spread: f64) -> ScoreMatrix {
    let data = (0..d * n).map(|_| rng.random_range(-spread..spread)).collect();
    ScoreMatrix::from_vec(d, n, data).expect("sizes agree")
}

/// Worst row-sum deviation from one over 100 random score matrices.
pub fn row_stochasticity_error(fault: Option<Fault>) -> f64 {
    let mut rng = rng_from(0x5c01);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (d, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let scores = random_scores(&mut rng, d, n, 3.0);
        let mut q = sinkhorn(&scores, 0.05, DEFAULT_ITERS).expect("finite scores");
        if fault == Some(Fault::SinkhornNormalization) {
            q.data_mut()[..d].iter_mut().for_each(|v| *v *= 1.01);
        }
        for s in q.row_sums() {
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

fn row_stochasticity(fault: Option<Fault>) -> Outcome {
    let worst = row_stochasticity_error(fault);
    ensure(
        worst <= 1e-6,
        format!("max |row sum - 1| = {worst:.2e} over 100 matrices (tol 1e-6)"),
    )
}

/// Worst prototype-marginal deviation from `1/d` at eps 0.05 and 1000
/// iterations.
pub fn prototype_marginal_error() -> f64 {
    let mut rng = rng_from(0x5c02);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (d, n) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let scores = random_scores(&mut rng, d, n, 1.0);
        let q = sinkhorn(&scores, 0.05, 1000).expect("finite scores");
        for m in q.prototype_marginals() {
            worst = worst.max((m - 1.0 / d as f64).abs());
        }
    }
    worst
}

fn prototype_marginals() -> Outcome {
    let worst = prototype_marginal_error();
    ensure(worst <= 1e-3, format!("max |marginal - 1/d| = {worst:.2e} (tol 1e-3)"))
}

/// Deviation of the 2x2 near-permutation assignment from a 10^4-iteration
/// reference, at the default and at 1000 iterations.
pub fn near_permutation_error() -> f64 {
    let scores = ScoreMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).expect("2x2");
    let reference = sinkhorn(&scores, 0.05, 10_000).expect("finite");
    [DEFAULT_ITERS, 1000]
        .iter()
        .map(|&iters| {
            let q = sinkhorn(&scores, 0.05, iters).expect("finite");
            q.data()
                .iter()
                .zip(reference.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn near_permutation() -> Outcome {
    let err = near_permutation_error();
    ensure(
        err <= 1e-6,
        format!("max deviation from reference = {err:.2e} (tol 1e-6)"),
    )
}

fn five_point(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut probe = x.to_vec();
    let mut at = |t: f64| {
        probe[i] = x[i] + t;
        f(&probe)
    };
    (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
}

fn max_rel_err(f: &dyn Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) -> f64 {
    (0..x.len())
        .map(|i| {
            let num = five_point(f, x, i, 1e-3);
            (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-7)
        })
        .fold(0.0, f64::max)
}

fn random_planes(rng: &mut Rng, channels: usize, h: usize, w: usize, simplex: bool) -> Planes {
    let n = h * w;
    let mut data: Vec<f64> = (0..channels * n).map(|_| rng.random_range(0.05..0.95)).collect();
    if simplex {
        for p in 0..n {
            let s: f64 = (0..channels).map(|c| data[c * n + p]).sum();
            (0..channels).for_each(|c| data[c * n + p] /= s);
        }
    }
    Planes::from_vec(channels, h, w, data).expect("sizes agree")
}

/// Worst relative finite-difference error per loss over 20 random points.
pub fn loss_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut rng = rng_from(0x5c03);
    let mut worst = [0.0f64; 7];
    let names = [
        "mapping",
        "mix",
        "cluster",
        "ac_segmentation",
        "ac_prototype",
        "scribble",
        "category",
    ];
    for _ in 0..20 {
        let (m, h, w, d) = (3, 3, 4, 4);
        let n = h * w;
        let like = |p: &Planes, x: &[f64]| {
            Planes::from_vec(p.channels(), p.height(), p.width(), x.to_vec()).expect("same size")
        };

        let scores = random_scores(&mut rng, d, n, 1.0);
        let q = sinkhorn(&scores, 0.05, DEFAULT_ITERS).expect("finite");
        let (_, g) = mapping_loss_with_grad(&scores, &q, 0.1).expect("shapes");
        let f =
            |x: &[f64]| mapping_loss(&ScoreMatrix::from_vec(d, n, x.to_vec()).expect("size"), &q, 0.1).expect("shapes");
        worst[0] = worst[0].max(max_rel_err(&f, scores.data(), &g));

        let pred = random_planes(&mut rng, 2 * m - 1, h, w, false);
        let target = random_planes(&mut rng, 2 * m - 1, h, w, false);
        let (_, gp, _) = mix_consistency_loss_with_grad(&pred, &target, MixSimilarity::Global);
        let f = |x: &[f64]| mix_consistency_loss_with_grad(&like(&pred, x), &target, MixSimilarity::Global).0;
        worst[1] = worst[1].max(max_rel_err(&f, pred.data(), &gp));

        let flat: Vec<f64> = (0..2 * m * d).map(|_| rng.random_range(0.1..2.0)).collect();
        let unflat = |x: &[f64]| -> Vec<Vec<Vec<f64>>> {
            x.chunks(m * d)
                .map(|s| s.chunks(d).map(<[f64]>::to_vec).collect())
                .collect()
        };
        let (_, g) = cluster_loss_with_grad(&unflat(&flat), 0.1);
        let g: Vec<f64> = g.into_iter().flatten().flatten().collect();
        worst[2] = worst[2].max(max_rel_err(&|x| cluster_loss_with_grad(&unflat(x), 0.1).0, &flat, &g));

        let schedule = sample_subsets(m, rng.random()).expect("m >= 2");
        let (_, g) = ac_segmentation_term_with_grad(&pred, &schedule);
        let f = |x: &[f64]| ac_segmentation_term_with_grad(&like(&pred, x), &schedule).0;
        worst[3] = worst[3].max(max_rel_err(&f, pred.data(), &g));

        let protos: Vec<f64> = (0..(2 * m - 1) * d).map(|_| rng.random_range(0.0..3.0)).collect();
        let unflat2 = |x: &[f64]| -> Vec<Vec<f64>> { x.chunks(d).map(<[f64]>::to_vec).collect() };
        let (_, g) = ac_prototype_term_with_grad(&unflat2(&protos), &schedule);
        let g: Vec<f64> = g.into_iter().flatten().collect();
        worst[4] = worst[4].max(max_rel_err(
            &|x| ac_prototype_term_with_grad(&unflat2(x), &schedule).0,
            &protos,
            &g,
        ));

        let probs = random_planes(&mut rng, m + 1, h, w, true);
        let scribbles = LabelMap::from_fn(h, w, |_, _| {
            if rng.random_bool(0.5) {
                rng.random_range(0..=m as u8)
            } else {
                UNLABELED
            }
        });
        let s = scribble_loss(&probs, &scribbles);
        worst[5] = worst[5].max(max_rel_err(
            &|x| scribble_loss(&like(&probs, x), &scribbles).value,
            probs.data(),
            &s.grad,
        ));

        let present: Vec<u8> = (1..=m as u8).filter(|_| rng.random_bool(0.5)).collect();
        let (_, g) = category_loss_with_grad(&probs, &present);
        worst[6] = worst[6].max(max_rel_err(
            &|x| category_loss_with_grad(&like(&probs, x), &present).0,
            probs.data(),
            &g,
        ));
    }
    names.into_iter().zip(worst).collect()
}

fn loss_gradients() -> Outcome {
    let errors = loss_gradient_errors();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst <= 1e-5, format!("max rel err {worst:.2e} (tol 1e-5): {detail}"))
}

fn mixed(image: Image, mask: BoundingBoxMask, m: usize) -> MixedSample {
    MixedSample {
        image,
        box_mask: mask,
        schedule: sample_subsets(m, 0).expect("m >= 2"),
        provenance: MixProvenance::default(),
    }
}

/// Number of identity violations over 50 random inputs.
pub fn mix_identity_violations() -> usize {
    let mut rng = rng_from(0x5c04);
    let mut bad = 0;
    for i in 0..50 {
        let (h, w) = (rng.random_range(8..24), rng.random_range(8..24));
        let x = Image::from_fn(h, w, |_, _| rng.random::<f64>());
        let mask = sample_bbox(h, w, (0.1, 0.4), i);
        let angle = rng.random_range(-30.0..30.0);
        let ratio = rng.random::<f64>();
        bad += usize::from(intra_mix(&x, &mask, 1.0, angle) != x);
        bad += usize::from(intra_mix(&x, &BoundingBoxMask::full(h, w), ratio, angle) != x);
        let rotated_zero = intra_mix(&x, &mask, ratio, 0.0);
        let dev = rotated_zero
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        bad += usize::from(dev > 1e-12);
        let y = Image::from_fn(h, w, |_, _| rng.random::<f64>());
        let other = sample_bbox(h, w, (0.1, 0.4), 1000 + i);
        let first = mixed(x.clone(), mask, 3);
        let mixed_pair = inter_mix(&first, &mixed(y, other, 3), 1.0).expect("same shape");
        bad += usize::from(mixed_pair.image != x);
    }
    bad
}

fn mix_identities() -> Outcome {
    let bad = mix_identity_violations();
    ensure(bad == 0, format!("{bad} violations over 50 inputs x 4 identities"))
}

/// `(L_ac + 2(m-1), prototype term + (m-1))` worst deviations for m in 2..=4
/// when combined channels equal their component sums.
pub fn anatomy_fixed_point_error() -> (f64, f64) {
    let mut rng = rng_from(0x5c05);
    let (mut worst_total, mut worst_proto): (f64, f64) = (0.0, 0.0);
    for m in 2..=4usize {
        let schedule = sample_subsets(m, m as u64).expect("m >= 2");
        let (h, w, d) = (4, 5, 6);
        let n = h * w;
        let mut data = vec![0.0; (2 * m - 1) * n];
        for v in &mut data[..m * n] {
            *v = rng.random::<f64>();
        }
        for (ch, subset) in schedule.combined() {
            for p in 0..n {
                data[ch * n + p] = subset.iter().map(|&c| data[(c as usize - 1) * n + p]).sum();
            }
        }
        let pred = Planes::from_vec(2 * m - 1, h, w, data).expect("sizes agree");
        let q: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
        let protos = aggregate_prototype_vectors(pred.data(), 2 * m - 1, &q, d);
        let total = anatomy_consistency_loss(&pred, &protos, &schedule);
        let proto = ac_prototype_term_with_grad(&protos, &schedule).0;
        let target = (m - 1) as f64;
        worst_total = worst_total.max((total + 2.0 * target).abs());
        worst_proto = worst_proto.max((proto + target).abs());
    }
    (worst_total, worst_proto)
}

fn anatomy_fixed_point() -> Outcome {
    let (total, proto) = anatomy_fixed_point_error();
    ensure(
        total <= 1e-9 && proto <= 1e-9,
        format!("|L_ac + 2(m-1)| = {total:.1e}, |prototype term + (m-1)| = {proto:.1e} (tol 1e-9)"),
    )
}

fn random_mask(rng: &mut Rng) -> Mask {
    let density = [0.0, 0.03, 0.15, 0.4, 0.8][rng.random_range(0..5)];
    Mask::from_fn(16, 16, |_, _| rng.random_bool(density))
}

fn brute_boundary(m: &Mask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w && m.get(r as usize, c as usize);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let edge = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            if at(r, c) && (edge || !at(r - 1, c) || !at(r + 1, c) || !at(r, c - 1) || !at(r, c + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

/// O(n^2) Hausdorff distance between mask boundaries; `None` if either is
/// empty.
pub fn brute_force_hausdorff(a: &Mask, b: &Mask) -> Option<f64> {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let directed = |x: &[(i64, i64)], y: &[(i64, i64)]| {
        x.iter()
            .map(|p| {
                y.iter()
                    .map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2))
                    .min()
                    .unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    };
    Some((directed(&ba, &bb).max(directed(&bb, &ba)) as f64).sqrt())
}

/// Dice by counting.
pub fn brute_force_dice(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut total) = (0, 0);
    for i in 0..a.len() {
        inter += usize::from(a.data()[i] && b.data()[i]);
        total += usize::from(a.data()[i]) + usize::from(b.data()[i]);
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Mismatches of `(dice, hausdorff)` against brute force on 200 random
/// 16x16 mask pairs.
pub fn metric_oracle_mismatches() -> (usize, usize) {
    let mut rng = rng_from(0x5c06);
    let (mut dice_bad, mut hd_bad) = (0, 0);
    for _ in 0..200 {
        let (a, b) = (random_mask(&mut rng), random_mask(&mut rng));
        dice_bad += usize::from(dice(&a, &b).ok() != Some(brute_force_dice(&a, &b)));
        hd_bad += usize::from(hausdorff(&a, &b).ok() != Some(brute_force_hausdorff(&a, &b)));
    }
    (dice_bad, hd_bad)
}

fn dice_oracle() -> Outcome {
    let (bad, _) = metric_oracle_mismatches();
    ensure(
        bad == 0,
        format!("{bad} of 200 random pairs differ from the counting oracle"),
    )
}

fn hausdorff_oracle() -> Outcome {
    let (_, bad) = metric_oracle_mismatches();
    ensure(
        bad == 0,
        format!("{bad} of 200 random pairs differ from the pairwise oracle"),
    )
}

/// `(Dice of a 2x2 block against its one-column shift, HD of (0,0) vs (3,4))`.
pub fn analytic_metrics() -> (f64, Option<f64>) {
    let block = |c0: usize| Mask::from_fn(6, 6, |r, c| (1..3).contains(&r) && (c0..c0 + 2).contains(&c));
    let a = Mask::from_fn(8, 8, |r, c| (r, c) == (0, 0));
    let b = Mask::from_fn(8, 8, |r, c| (r, c) == (3, 4));
    (
        dice(&block(1), &block(2)).unwrap_or(f64::NAN),
        hausdorff(&a, &b).ok().flatten(),
    )
}

fn metric_analytic() -> Outcome {
    let (d, h) = analytic_metrics();
    ensure(
        d == 0.5 && h == Some(5.0),
        format!("block shift Dice {d}, 3-4-5 HD {h:?}"),
    )
}
