//! Intra- and inter-image mixing, class-subset schedules and multi-crop
//! sampling.
//!
//! An intra-mixed image keeps a random box untouched and blends the rest of
//! the image with a slightly rotated copy:
//! `x' = I_b x + (1 - I_b) [β' x + (1 - β') R(x, θ)]`.
//! Two intra-mixed images are then blended with ratio `β` and their box
//! masks united.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Grid, Image, LabelMap, Planes};
use crate::phantom::{present_classes, PhantomSample};
use crate::rng::{rng_from, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixError {
    #[error("beta concentration must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("subset schedules need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("inter-mix pair has different subset schedules")]
    ScheduleMismatch,
    #[error("inter-mix pair has different shapes: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

/// Mixing hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    /// Concentration of the symmetric Beta used for both mix ratios.
    pub alpha: f64,
    /// Rotation angles are drawn from `[-max_angle, max_angle]` degrees.
    pub max_angle: f64,
    /// Area fraction range of the preserved box.
    pub box_area: (f64, f64),
    pub crops: CropConfig,
    /// Intra-mixed variants drawn from each crop per epoch.
    pub mix_repeats: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            max_angle: 15.0,
            box_area: (0.1, 0.4),
            crops: CropConfig::default(),
            mix_repeats: 4,
        }
    }
}

impl MixConfig {
    /// Training units each source contributes per epoch.
    pub fn units_per_source(&self) -> usize {
        (self.crops.global_count + self.crops.local_count) * self.mix_repeats
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropConfig {
    pub global_count: usize,
    pub global_scale: (f64, f64),
    pub local_count: usize,
    pub local_scale: (f64, f64),
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            global_count: 4,
            global_scale: (0.6, 1.0),
            local_count: 6,
            local_scale: (0.2, 0.5),
        }
    }
}

/// Half-open pixel rectangle `[row0, row1) × [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxCoords {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BoxCoords {
    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row0..self.row1).contains(&r) && (self.col0..self.col1).contains(&c)
    }
}

/// Binary box mask `I_b`; after an inter-mix it is the union of both boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundingBoxMask {
    mask: Grid<u8>,
    boxes: Vec<BoxCoords>,
}

impl BoundingBoxMask {
    pub fn from_box(height: usize, width: usize, b: BoxCoords) -> Self {
        assert!(b.row0 < b.row1 && b.row1 <= height && b.col0 < b.col1 && b.col1 <= width);
        Self {
            mask: Grid::from_fn(height, width, |r, c| u8::from(b.contains(r, c))),
            boxes: vec![b],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::from_box(
            height,
            width,
            BoxCoords {
                row0: 0,
                col0: 0,
                row1: height,
                col1: width,
            },
        )
    }

    pub fn mask(&self) -> &Grid<u8> {
        &self.mask
    }

    pub fn boxes(&self) -> &[BoxCoords] {
        &self.boxes
    }

    pub fn area(&self) -> usize {
        self.mask.data().iter().map(|&v| v as usize).sum()
    }

    /// Elementwise maximum of the two masks.
    pub fn union(&self, other: &BoundingBoxMask) -> BoundingBoxMask {
        let data = self
            .mask
            .data()
            .iter()
            .zip(other.mask.data())
            .map(|(&a, &b)| a.max(b))
            .collect();
        let mut boxes = self.boxes.clone();
        boxes.extend_from_slice(&other.boxes);
        BoundingBoxMask {
            mask: Grid::from_vec(self.mask.height(), self.mask.width(), data).expect("same shape"),
            boxes,
        }
    }
}

/// A random class order `π` whose prefixes are the nested subsets
/// `Ω_2 ⊂ … ⊂ Ω_m`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSchedule {
    permutation: Vec<u8>,
}

impl SubsetSchedule {
    pub fn from_permutation(permutation: Vec<u8>) -> Result<Self, MixError> {
        let m = permutation.len();
        if m < 2 {
            return Err(MixError::TooFewClasses(m));
        }
        let mut sorted = permutation.clone();
        sorted.sort_unstable();
        assert!(
            sorted.iter().enumerate().all(|(i, &c)| c as usize == i + 1),
            "not a permutation of 1..=m: {permutation:?}"
        );
        Ok(Self { permutation })
    }

    pub fn num_classes(&self) -> usize {
        self.permutation.len()
    }

    pub fn permutation(&self) -> &[u8] {
        &self.permutation
    }

    /// `Ω_k` for `k` in `2..=m`.
    pub fn subset(&self, k: usize) -> &[u8] {
        assert!((2..=self.num_classes()).contains(&k));
        &self.permutation[..k]
    }

    /// Zero-based prediction channel holding the combined map of `Ω_k`.
    pub fn combined_channel(&self, k: usize) -> usize {
        self.num_classes() + k - 2
    }

    /// `(channel, Ω_k)` for every combined channel.
    pub fn combined(&self) -> impl Iterator<Item = (usize, &[u8])> {
        (2..=self.num_classes()).map(move |k| (self.combined_channel(k), self.subset(k)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MixProvenance {
    pub sources: Vec<usize>,
    pub intra_ratios: Vec<f64>,
    pub angles: Vec<f64>,
    pub inter_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub image: Image,
    pub box_mask: BoundingBoxMask,
    pub schedule: SubsetSchedule,
    pub provenance: MixProvenance,
}

/// Channelwise mix of two predictions, used as the consistency target.
#[derive(Clone, Debug, PartialEq)]
pub struct MixTarget {
    pub channels: Planes,
    pub ratio: f64,
}

pub fn sample_mix_ratio(alpha: f64, seed: u64) -> Result<f64, MixError> {
    sample_mix_ratio_with(alpha, &mut rng_from(seed))
}

pub fn sample_mix_ratio_with(alpha: f64, rng: &mut Rng) -> Result<f64, MixError> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(MixError::NonPositiveAlpha(alpha));
    }
    let beta = Beta::new(alpha, alpha).map_err(|_| MixError::NonPositiveAlpha(alpha))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

#[inline]
fn bilinear_clamped(image: &Image, y: f64, x: f64) -> f64 {
    let (h, w) = image.shape();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = image.get(y0, x0) * (1.0 - fx) + image.get(y0, x1) * fx;
    let bottom = image.get(y1, x0) * (1.0 - fx) + image.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear rotation by `degrees` about the image centre; samples falling
/// outside the frame replicate the nearest edge pixel.
pub fn rotate(image: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return image.clone();
    }
    let (h, w) = image.shape();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (s, c) = degrees.to_radians().sin_cos();
    Image::from_fn(h, w, |r, col| {
        let dy = r as f64 - cy;
        let dx = col as f64 - cx;
        // Inverse map: rotate the output coordinate by -θ.
        let sy = c * dy - s * dx + cy;
        let sx = s * dy + c * dx + cx;
        bilinear_clamped(image, sy, sx)
    })
}

pub fn intra_mix(x: &Image, box_mask: &BoundingBoxMask, intra_ratio: f64, degrees: f64) -> Image {
    assert_eq!(x.shape(), box_mask.mask().shape());
    let rotated = rotate(x, degrees);
    let data = x
        .data()
        .iter()
        .zip(rotated.data())
        .zip(box_mask.mask().data())
        .map(|((&v, &r), &inside)| {
            let ib = f64::from(inside);
            ib * v + (1.0 - ib) * (intra_ratio * v + (1.0 - intra_ratio) * r)
        })
        .collect();
    Image::from_vec(x.height(), x.width(), data).expect("same shape")
}

/// Draws a box whose area fraction lies in `area` and whose aspect ratio
/// (height / width) lies roughly in `aspect`.
pub fn sample_box_with(height: usize, width: usize, area: (f64, f64), aspect: (f64, f64), rng: &mut Rng) -> BoxCoords {
    let total = (height * width) as f64;
    let (lo, hi) = (area.0 * total - 1e-9, area.1 * total + 1e-9);
    let fits = |bh: usize, bw: usize| {
        let a = (bh * bw) as f64;
        a >= lo && a <= hi
    };
    let place = |bh: usize, bw: usize, rng: &mut Rng| {
        let row0 = rng.random_range(0..=height - bh);
        let col0 = rng.random_range(0..=width - bw);
        BoxCoords {
            row0,
            col0,
            row1: row0 + bh,
            col1: col0 + bw,
        }
    };
    for _ in 0..64 {
        let target = rng.random_range(area.0..=area.1) * total;
        let ratio = rng.random_range(aspect.0.ln()..=aspect.1.ln()).exp();
        let bh = ((target * ratio).sqrt().round() as usize).clamp(1, height);
        let bw = ((target / bh as f64).round() as usize).clamp(1, width);
        if fits(bh, bw) {
            return place(bh, bw, rng);
        }
    }
    // Exhaustive fallback over all admissible sizes.
    let mut sizes = Vec::new();
    for bh in 1..=height {
        for bw in 1..=width {
            if fits(bh, bw) {
                sizes.push((bh, bw));
            }
        }
    }
    let (bh, bw) = if sizes.is_empty() {
        // Unsatisfiable range: take the size whose area is closest.
        let goal = 0.5 * (area.0 + area.1) * total;
        (1..=height)
            .flat_map(|bh| (1..=width).map(move |bw| (bh, bw)))
            .min_by(|a, b| {
                let da = ((a.0 * a.1) as f64 - goal).abs();
                let db = ((b.0 * b.1) as f64 - goal).abs();
                da.total_cmp(&db)
            })
            .expect("non-empty image")
    } else {
        sizes[rng.random_range(0..sizes.len())]
    };
    place(bh, bw, rng)
}

pub fn sample_bbox(height: usize, width: usize, area: (f64, f64), seed: u64) -> BoundingBoxMask {
    sample_bbox_with(height, width, area, &mut rng_from(seed))
}

pub fn sample_bbox_with(height: usize, width: usize, area: (f64, f64), rng: &mut Rng) -> BoundingBoxMask {
    let b = sample_box_with(height, width, area, (0.5, 2.0), rng);
    BoundingBoxMask::from_box(height, width, b)
}

pub fn sample_subsets(m: usize, seed: u64) -> Result<SubsetSchedule, MixError> {
    if m < 2 {
        return Err(MixError::TooFewClasses(m));
    }
    let mut perm: Vec<u8> = (1..=m as u8).collect();
    perm.shuffle(&mut rng_from(seed));
    SubsetSchedule::from_permutation(perm)
}

pub fn inter_mix(first: &MixedSample, second: &MixedSample, ratio: f64) -> Result<MixedSample, MixError> {
    if first.schedule != second.schedule {
        return Err(MixError::ScheduleMismatch);
    }
    if first.image.shape() != second.image.shape() {
        return Err(MixError::ShapeMismatch(first.image.shape(), second.image.shape()));
    }
    let data = first
        .image
        .data()
        .iter()
        .zip(second.image.data())
        .map(|(&a, &b)| ratio * a + (1.0 - ratio) * b)
        .collect();
    let mut provenance = first.provenance.clone();
    provenance.sources.extend_from_slice(&second.provenance.sources);
    provenance
        .intra_ratios
        .extend_from_slice(&second.provenance.intra_ratios);
    provenance.angles.extend_from_slice(&second.provenance.angles);
    provenance.inter_ratio = Some(ratio);
    Ok(MixedSample {
        image: Image::from_vec(first.image.height(), first.image.width(), data).expect("same shape"),
        box_mask: first.box_mask.union(&second.box_mask),
        schedule: first.schedule.clone(),
        provenance,
    })
}

pub fn mix_targets(first: &Planes, second: &Planes, ratio: f64) -> MixTarget {
    assert!(first.same_shape(second), "prediction shapes differ");
    let data = first
        .data()
        .iter()
        .zip(second.data())
        .map(|(&a, &b)| (ratio * a + (1.0 - ratio) * b).clamp(0.0, 1.0))
        .collect();
    MixTarget {
        channels: Planes::from_vec(first.channels(), first.height(), first.width(), data).expect("same shape"),
        ratio,
    }
}

/// Bilinear resize with pixel-centre alignment; same-size resizes are exact.
pub fn resize_bilinear(image: &Image, height: usize, width: usize) -> Image {
    if image.shape() == (height, width) {
        return image.clone();
    }
    let sy = image.height() as f64 / height as f64;
    let sx = image.width() as f64 / width as f64;
    Image::from_fn(height, width, |r, c| {
        bilinear_clamped(image, (r as f64 + 0.5) * sy - 0.5, (c as f64 + 0.5) * sx - 0.5)
    })
}

pub fn resize_nearest(labels: &LabelMap, height: usize, width: usize) -> LabelMap {
    if labels.shape() == (height, width) {
        return labels.clone();
    }
    let sy = labels.height() as f64 / height as f64;
    let sx = labels.width() as f64 / width as f64;
    LabelMap::from_fn(height, width, |r, c| {
        let y = (((r as f64 + 0.5) * sy) as usize).min(labels.height() - 1);
        let x = (((c as f64 + 0.5) * sx) as usize).min(labels.width() - 1);
        labels.get(y, x)
    })
}

/// A resized crop of a source sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub sample: PhantomSample,
    pub window: BoxCoords,
    pub global: bool,
}

/// Cuts one crop with area fraction in `scale` and resizes it to
/// `out_size × out_size` (bilinear image, nearest labels and scribbles).
pub fn crop_with(sample: &PhantomSample, scale: (f64, f64), out_size: usize, global: bool, rng: &mut Rng) -> Crop {
    let (h, w) = sample.image.shape();
    let window = sample_box_with(h, w, scale, (0.75, 4.0 / 3.0), rng);
    let BoxCoords { row0, col0, row1, col1 } = window;
    let image = resize_bilinear(&sample.image.crop(row0, col0, row1, col1), out_size, out_size);
    let labels = resize_nearest(&sample.labels.crop(row0, col0, row1, col1), out_size, out_size);
    let scribbles = resize_nearest(&sample.scribbles.crop(row0, col0, row1, col1), out_size, out_size);
    let present_classes = if window.area() == h * w {
        sample.present_classes.clone()
    } else {
        // Image-level labels follow what is visible in the crop.
        present_classes(&labels)
    };
    Crop {
        sample: PhantomSample {
            image,
            labels,
            scribbles,
            present_classes,
        },
        window,
        global,
    }
}

pub fn multi_crop(sample: &PhantomSample, crops: &CropConfig, out_size: usize, seed: u64) -> Vec<Crop> {
    let mut rng = rng_from(seed);
    let mut out = Vec::with_capacity(crops.global_count + crops.local_count);
    for _ in 0..crops.global_count {
        out.push(crop_with(sample, crops.global_scale, out_size, true, &mut rng));
    }
    for _ in 0..crops.local_count {
        out.push(crop_with(sample, crops.local_scale, out_size, false, &mut rng));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomSpec};
    use proptest::prelude::*;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rng_from(seed);
        Image::from_fn(h, w, |_, _| rng.random::<f64>())
    }

    fn smooth_image(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |r, c| {
            0.5 + 0.25 * (r as f64 / 9.0).sin() * (c as f64 / 11.0).cos() + 0.2 * (r as f64 + c as f64) / (h + w) as f64
        })
    }

    #[test]
    fn beta_one_is_uniform_on_average() {
        let mut rng = rng_from(42);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_mix_ratio_with(1.0, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((0.49..=0.51).contains(&mean), "{mean}");
    }

    #[test]
    fn mix_ratio_is_seeded_and_validated() {
        assert_eq!(sample_mix_ratio(0.7, 5).unwrap(), sample_mix_ratio(0.7, 5).unwrap());
        assert_eq!(sample_mix_ratio(0.0, 5), Err(MixError::NonPositiveAlpha(0.0)));
        assert!(sample_mix_ratio(-1.0, 5).is_err());
    }

    #[test]
    fn rotation_identities() {
        let x = random_image(13, 17, 1);
        assert_eq!(rotate(&x, 0.0), x);
        let flat = Image::new(20, 20, 0.37);
        for deg in [-45.0, -12.5, 3.0, 30.0] {
            assert!(rotate(&flat, deg).data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn rotation_round_trip_is_close_on_smooth_images() {
        let x = smooth_image(64, 64);
        let back = rotate(&rotate(&x, 10.0), -10.0);
        let mut worst: f64 = 0.0;
        for r in 8..56 {
            for c in 8..56 {
                worst = worst.max((back.get(r, c) - x.get(r, c)).abs());
            }
        }
        assert!(worst <= 0.05, "{worst}");
    }

    #[test]
    fn rotation_by_ninety_degrees_permutes_pixels() {
        // On an odd square grid the centre is a pixel, so 90° is exact.
        let x = random_image(9, 9, 3);
        let r = rotate(&x, 90.0);
        for i in 0..9 {
            for j in 0..9 {
                let expected = x.get(8 - j, i);
                let found = r.get(i, j);
                assert!((expected - found).abs() < 1e-12 || (x.get(j, 8 - i) - found).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn intra_mix_identities() {
        let x = random_image(8, 8, 2);
        let b = sample_bbox(8, 8, (0.2, 0.4), 3);
        assert_eq!(intra_mix(&x, &b, 1.0, 12.0), x);
        assert_eq!(intra_mix(&x, &BoundingBoxMask::full(8, 8), 0.3, 12.0), x);
        let z = intra_mix(&x, &b, 0.3, 0.0);
        assert!(z.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn intra_mix_matches_scalar_formula() {
        for seed in 0..20 {
            let x = random_image(8, 8, seed);
            let b = sample_bbox(8, 8, (0.1, 0.5), seed + 100);
            let beta = sample_mix_ratio(1.0, seed + 200).unwrap();
            let theta = 7.0;
            let got = intra_mix(&x, &b, beta, theta);
            let rot = rotate(&x, theta);
            for r in 0..8 {
                for c in 0..8 {
                    let ib = f64::from(b.mask().get(r, c));
                    let want = ib * x.get(r, c) + (1.0 - ib) * (beta * x.get(r, c) + (1.0 - beta) * rot.get(r, c));
                    assert!((got.get(r, c) - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn bbox_sampling() {
        let full = sample_bbox(10, 12, (1.0, 1.0), 9);
        assert!(full.mask().data().iter().all(|&v| v == 1));
        let mut rng = rng_from(4);
        for _ in 0..1000 {
            let b = sample_bbox_with(37, 29, (0.1, 0.3), &mut rng);
            let frac = b.area() as f64 / (37.0 * 29.0);
            assert!((0.1..=0.3).contains(&frac), "{frac}");
            let bx = b.boxes()[0];
            assert_eq!(b.area(), bx.area());
            assert!(bx.row1 <= 37 && bx.col1 <= 29);
        }
        assert_eq!(sample_bbox(20, 20, (0.1, 0.3), 77), sample_bbox(20, 20, (0.1, 0.3), 77));
    }

    #[test]
    fn subset_schedules() {
        let two = sample_subsets(2, 5).unwrap();
        assert_eq!(two.combined().count(), 1);
        let mut s = two.subset(2).to_vec();
        s.sort();
        assert_eq!(s, vec![1, 2]);
        assert_eq!(sample_subsets(1, 0), Err(MixError::TooFewClasses(1)));

        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..1000 {
            let sch = sample_subsets(3, seed).unwrap();
            assert_eq!(sch.subset(2), &sch.subset(3)[..2]);
            assert_eq!(sch.subset(3).len(), 3);
            let mut o2 = sch.subset(2).to_vec();
            o2.sort();
            seen.insert(o2);
        }
        assert_eq!(seen.len(), 3);
        assert_eq!(sample_subsets(5, 3), sample_subsets(5, 3));
    }

    fn mixed(image: Image, b: BoxCoords, schedule: &SubsetSchedule) -> MixedSample {
        let (h, w) = image.shape();
        MixedSample {
            image,
            box_mask: BoundingBoxMask::from_box(h, w, b),
            schedule: schedule.clone(),
            provenance: MixProvenance {
                sources: vec![0],
                intra_ratios: vec![1.0],
                angles: vec![0.0],
                inter_ratio: None,
            },
        }
    }

    #[test]
    fn inter_mix_identities() {
        let sch = sample_subsets(3, 1).unwrap();
        let b1 = BoxCoords {
            row0: 0,
            col0: 0,
            row1: 2,
            col1: 3,
        };
        let b2 = BoxCoords {
            row0: 4,
            col0: 4,
            row1: 8,
            col1: 6,
        };
        let a = mixed(random_image(8, 8, 1), b1, &sch);
        let b = mixed(random_image(8, 8, 2), b2, &sch);
        let m = inter_mix(&a, &b, 1.0).unwrap();
        assert_eq!(m.image, a.image);
        assert_eq!(m.box_mask.area(), 6 + 8);
        let same = inter_mix(&a, &a, 0.5).unwrap();
        assert_eq!(same.image, a.image);

        let other = sample_subsets(3, 2).unwrap();
        let other = if other == sch {
            sample_subsets(3, 4).unwrap()
        } else {
            other
        };
        let c = mixed(random_image(8, 8, 3), b2, &other);
        assert_eq!(inter_mix(&a, &c, 0.5).unwrap_err(), MixError::ScheduleMismatch);
    }

    #[test]
    fn mix_target_arithmetic() {
        let a = Planes::from_vec(1, 1, 1, vec![0.8]).unwrap();
        let b = Planes::from_vec(1, 1, 1, vec![0.4]).unwrap();
        assert!((mix_targets(&a, &b, 0.25).channels.data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(mix_targets(&a, &b, 1.0).channels, a);
        assert!((mix_targets(&a, &a, 0.3).channels.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn multi_crop_identity_and_soundness() {
        let spec = PhantomSpec {
            height: 32,
            width: 32,
            ..PhantomSpec::default()
        };
        let s = generate(&spec, 3).unwrap();
        let cfg = CropConfig {
            global_count: 1,
            global_scale: (1.0, 1.0),
            local_count: 0,
            local_scale: (0.2, 0.5),
        };
        let crops = multi_crop(&s, &cfg, 32, 1);
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].sample, s);

        let crops = multi_crop(&s, &CropConfig::default(), 24, 9);
        assert_eq!(crops.len(), 10);
        for c in &crops {
            assert_eq!(c.sample.image.shape(), (24, 24));
            for (&sc, &l) in c.sample.scribbles.data().iter().zip(c.sample.labels.data()) {
                assert!(sc == crate::phantom::UNLABELED || sc == l);
            }
        }
    }

    #[test]
    fn default_amplification_reaches_forty() {
        let cfg = MixConfig::default();
        assert_eq!(cfg.units_per_source(), 40);
        assert!(25 * cfg.units_per_source() >= 900);
    }

    proptest! {
        #[test]
        fn mixes_preserve_unit_range(seed in 0u64..5000, beta in 0.0f64..=1.0, theta in -45.0f64..=45.0) {
            let sch = sample_subsets(3, seed).unwrap();
            let x1 = random_image(10, 9, seed);
            let x2 = random_image(10, 9, seed + 1);
            let b1 = sample_bbox(10, 9, (0.1, 0.5), seed);
            let b2 = sample_bbox(10, 9, (0.1, 0.5), seed + 7);
            let m1 = intra_mix(&x1, &b1, beta, theta);
            let m2 = intra_mix(&x2, &b2, 1.0 - beta, -theta);
            prop_assert!(m1.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let a = MixedSample { image: m1, box_mask: b1, schedule: sch.clone(), provenance: MixProvenance { sources: vec![], intra_ratios: vec![], angles: vec![], inter_ratio: None } };
            let b = MixedSample { image: m2, box_mask: b2, schedule: sch, provenance: a.provenance.clone() };
            let m = inter_mix(&a, &b, beta).unwrap();
            prop_assert!(m.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(m.box_mask.area() >= a.box_mask.area().max(b.box_mask.area()));
        }
    }
}
