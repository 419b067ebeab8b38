//! Scribble synthesis: one constrained random-walk curve per class region.

use rand::Rng as _;

use super::UNLABELED;
use crate::grid::LabelMap;
use crate::rng::rng_from;

/// Regions smaller than this get no scribble.
pub const MIN_REGION: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScribbleWarning {
    pub class: u8,
    pub area: usize,
}

impl std::fmt::Display for ScribbleWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "class {} left unscribbled: region has {} pixel(s), need {}",
            self.class, self.area, MIN_REGION
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScribbleOutput {
    pub scribbles: LabelMap,
    pub warnings: Vec<ScribbleWarning>,
}

const DIRS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

/// Draws a curve per class present in `labels` (background included).
///
/// Each curve is a momentum random walk confined to its class region and
/// stops once it has visited `max(3, round(coverage · area))` distinct
/// pixels. Consecutive walk positions are 8-neighbours, so every curve is
/// 8-connected.
pub fn synthesize_scribbles(labels: &LabelMap, coverage: f64, seed: u64) -> ScribbleOutput {
    let (h, w) = labels.shape();
    let mut scribbles = LabelMap::new(h, w, UNLABELED);
    let mut warnings = Vec::new();
    let mut rng = rng_from(seed);

    let mut areas = [0usize; 256];
    for &l in labels.data() {
        areas[l as usize] += 1;
    }
    for class in 0..=254u8 {
        let area = areas[class as usize];
        if area == 0 {
            continue;
        }
        if area < MIN_REGION {
            warnings.push(ScribbleWarning { class, area });
            continue;
        }
        let target = ((coverage * area as f64).round() as usize).clamp(MIN_REGION, area);
        let in_region = |r: isize, c: isize| {
            r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && labels.get(r as usize, c as usize) == class
        };

        // Prefer starting away from the region boundary.
        let region: Vec<(isize, isize)> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r as isize, c as isize)))
            .filter(|&(r, c)| in_region(r, c))
            .collect();
        let interior: Vec<(isize, isize)> = region
            .iter()
            .copied()
            .filter(|&(r, c)| DIRS.iter().all(|&(dr, dc)| in_region(r + dr, c + dc)))
            .collect();
        let pool = if interior.is_empty() { &region } else { &interior };
        let (mut r, mut c) = pool[rng.random_range(0..pool.len())];
        let mut dir = rng.random_range(0..8usize);

        let mut count = 0;
        let mark = |r: isize, c: isize, scribbles: &mut LabelMap| {
            if scribbles.get(r as usize, c as usize) == UNLABELED {
                scribbles.set(r as usize, c as usize, class);
                1
            } else {
                0
            }
        };
        count += mark(r, c, &mut scribbles);
        let max_steps = 200 * target;
        let mut steps = 0;
        while count < target && steps < max_steps {
            steps += 1;
            let roll: f64 = rng.random();
            if roll > 0.85 {
                dir = if roll > 0.925 { (dir + 1) % 8 } else { (dir + 7) % 8 };
            }
            // Turn away from the boundary, alternating sides, until a move fits.
            let turn_right = rng.random::<bool>();
            let mut moved = false;
            for k in 0..8usize {
                let offset = k.div_ceil(2);
                let d = if (k % 2 == 1) == turn_right {
                    (dir + offset) % 8
                } else {
                    (dir + 8 - offset) % 8
                };
                let (dr, dc) = DIRS[d];
                if in_region(r + dr, c + dc) {
                    r += dr;
                    c += dc;
                    dir = d;
                    moved = true;
                    break;
                }
            }
            if !moved {
                break;
            }
            count += mark(r, c, &mut scribbles);
        }
    }
    ScribbleOutput { scribbles, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_region_is_warned_not_scribbled() {
        let mut labels = LabelMap::new(16, 16, 0);
        labels.set(5, 5, 1);
        let out = synthesize_scribbles(&labels, 0.01, 3);
        assert_eq!(out.warnings, vec![ScribbleWarning { class: 1, area: 1 }]);
        assert!(out.scribbles.data().iter().all(|&s| s != 1));
        // Background (255 pixels) still gets its minimum 3-pixel curve.
        assert!(out.scribbles.data().iter().filter(|&&s| s == 0).count() >= 3);
    }

    #[test]
    fn scribbles_are_contained_in_their_region() {
        let labels = LabelMap::from_fn(32, 32, |r, c| ((r / 8 + c / 11) % 4) as u8);
        for seed in 0..20 {
            let out = synthesize_scribbles(&labels, 0.2, seed);
            for (&s, &l) in out.scribbles.data().iter().zip(labels.data()) {
                assert!(s == UNLABELED || s == l);
            }
        }
    }

    #[test]
    fn coverage_controls_count() {
        // 1000-pixel class-1 block inside a 40x40 frame.
        let labels = LabelMap::from_fn(40, 40, |r, c| u8::from((5..30).contains(&r) && (0..40).contains(&c)));
        assert_eq!(labels.data().iter().filter(|&&l| l == 1).count(), 1000);
        for seed in 0..50 {
            let out = synthesize_scribbles(&labels, 0.1, seed);
            let n = out.scribbles.data().iter().filter(|&&s| s == 1).count();
            assert!((70..=130).contains(&n), "seed {seed}: {n}");
        }
    }

    #[test]
    fn curves_are_eight_connected() {
        let labels = LabelMap::from_fn(30, 30, |r, c| {
            u8::from((r as i32 - 15).pow(2) + (c as i32 - 15).pow(2) < 100)
        });
        let out = synthesize_scribbles(&labels, 0.1, 9);
        for class in [0u8, 1] {
            let pix: Vec<(usize, usize)> = (0..30)
                .flat_map(|r| (0..30).map(move |c| (r, c)))
                .filter(|&(r, c)| out.scribbles.get(r, c) == class)
                .collect();
            let mut seen = vec![pix[0]];
            let mut stack = vec![pix[0]];
            while let Some((r, c)) = stack.pop() {
                for &q in &pix {
                    if !seen.contains(&q) && r.abs_diff(q.0) <= 1 && c.abs_diff(q.1) <= 1 {
                        seen.push(q);
                        stack.push(q);
                    }
                }
            }
            assert_eq!(seen.len(), pix.len(), "class {class} curve is disconnected");
        }
    }
}
