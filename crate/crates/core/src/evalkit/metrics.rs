//! Overlap and boundary-distance metrics on binary masks.

use crate::grid::{Grid, LabelMap};

use super::EvalError;

pub type Mask = Grid<bool>;

/// Pixels carrying `class`.
pub fn class_mask(labels: &LabelMap, class: u8) -> Mask {
    labels.map(|v| v == class)
}

fn check_shapes(a: &Mask, b: &Mask) -> Result<(), EvalError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(EvalError::ShapeMismatch(a.shape(), b.shape()))
    }
}

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64, EvalError> {
    check_shapes(pred, gt)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Mask pixels with a 4-neighbour outside the mask or on the image border.
pub fn boundary(mask: &Mask) -> Mask {
    let (h, w) = mask.shape();
    Mask::from_fn(h, w, |r, c| {
        mask.get(r, c)
            && (r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1))
    })
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel (Felzenszwalb-Huttenlocher lower envelope, applied per axis).
/// Returns `None` for an empty set. Values are integers held in `f64`.
pub fn squared_distance_transform(set: &Mask) -> Option<Grid<f64>> {
    if !set.data().iter().any(|&v| v) {
        return None;
    }
    let (h, w) = set.shape();
    let inf = ((h * h + w * w) as f64 + 1.0) * 4.0;
    let mut grid = set.map(|v| if v { 0.0 } else { inf });
    let mut line = Vec::new();
    let mut out = Vec::new();
    for c in 0..w {
        line.clear();
        line.extend((0..h).map(|r| grid.get(r, c)));
        lower_envelope(&line, &mut out);
        for (r, &v) in out.iter().enumerate() {
            grid.set(r, c, v);
        }
    }
    for r in 0..h {
        line.clear();
        line.extend((0..w).map(|c| grid.get(r, c)));
        lower_envelope(&line, &mut out);
        for (c, &v) in out.iter().enumerate() {
            grid.set(r, c, v);
        }
    }
    Some(grid)
}

/// `out[q] = min_p (q - p)^2 + f[p]`.
fn lower_envelope(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 0.0);
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |x: usize| (x * x) as f64;
    let parabola_cut = |q: usize, p: usize| ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        let mut s = parabola_cut(q, v[k]);
        // z[0] is -inf, so this stops at k = 0 at the latest.
        while s <= z[k] {
            k -= 1;
            s = parabola_cut(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Distances from every boundary pixel of `from` to the boundary of `to`.
fn directed(from: &Mask, to_dt: &Grid<f64>) -> Vec<f64> {
    from.data()
        .iter()
        .zip(to_dt.data())
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = (q / 100.0 * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Symmetric Hausdorff distance between the boundaries of two masks, in
/// pixels. `None` when either mask is empty.
///
/// With `percentile = Some(q)` each directed distance set is summarised by
/// its `q`-th percentile instead of its maximum (e.g. 95 for HD95).
pub fn hausdorff_with(pred: &Mask, gt: &Mask, percentile_q: Option<f64>) -> Result<Option<f64>, EvalError> {
    check_shapes(pred, gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (Some(dt_p), Some(dt_g)) = (squared_distance_transform(&bp), squared_distance_transform(&bg)) else {
        return Ok(None);
    };
    let mut ab = directed(&bp, &dt_g);
    let mut ba = directed(&bg, &dt_p);
    let summary = |v: &mut Vec<f64>| match percentile_q {
        Some(q) => percentile(v, q),
        None => v.iter().copied().fold(0.0, f64::max),
    };
    Ok(Some(summary(&mut ab).max(summary(&mut ba))))
}

pub fn hausdorff(pred: &Mask, gt: &Mask) -> Result<Option<f64>, EvalError> {
    hausdorff_with(pred, gt, None)
}

/// Mean Dice over classes `1..=m` of two label maps.
pub fn mean_foreground_dice(pred: &LabelMap, gt: &LabelMap, m: usize) -> f64 {
    let total: f64 = (1..=m as u8)
        .map(|c| dice(&class_mask(pred, c), &class_mask(gt, c)).expect("label maps share a shape"))
        .sum();
    total / m as f64
}
