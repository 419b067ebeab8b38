//! Procedural multi-class phantoms with scribble annotations.
//!
//! Structure mode draws a cardiac-like layout: an inner disk (class 1)
//! enclosed by an annulus (class 2), a crescent hugging the annulus
//! (class 3) and disjoint ellipses for any further classes. Pathology mode
//! starts from such a host and carves irregular blobs inside the annulus.
//!
//! Generation runs in three independent random streams (geometry,
//! pathology, rendering) so the host labels of a pathology sample are
//! exactly the labels of the structure sample with the same seed.

mod io;
mod scribble;

pub use io::{
    read_dataset, write_dataset, DatasetError, DatasetManifest, ManifestEntry, FORMAT_VERSION, MANIFEST_FILE,
};
pub use scribble::{synthesize_scribbles, ScribbleOutput, ScribbleWarning};

use std::collections::{BTreeSet, VecDeque};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Image, LabelMap};
use crate::rng::{derive_seed, rng_for, Rng};

/// Scribble id for pixels without annotation.
pub const UNLABELED: u8 = 255;
pub const DEFAULT_COVERAGE: f64 = 0.05;
/// Probability that each pathology class is carved into a sample.
pub const PATHOLOGY_PRESENCE: f64 = 0.7;

const STREAM_GEOMETRY: u64 = 1;
const STREAM_PATHOLOGY: u64 = 2;
const STREAM_RENDER: u64 = 3;
const STREAM_SCRIBBLE: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomMode {
    Structure,
    Pathology,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Foreground classes, background excluded.
    pub num_classes: usize,
    pub mode: PhantomMode,
    pub noise_sigma: f64,
    pub bias_field_strength: f64,
    pub shape_jitter: f64,
    /// Fraction of each class region covered by its scribble.
    #[serde(default = "default_coverage")]
    pub scribble_coverage: f64,
}

fn default_coverage() -> f64 {
    DEFAULT_COVERAGE
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            num_classes: 3,
            mode: PhantomMode::Structure,
            noise_sigma: 0.08,
            bias_field_strength: 0.25,
            shape_jitter: 0.5,
            scribble_coverage: DEFAULT_COVERAGE,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("image must be at least 16x16, got {height}x{width}")]
    TooSmall { height: usize, width: usize },
    #[error("class count must be in 1..=8, got {0}")]
    ClassCount(usize),
    #[error("structure phantoms need at least 2 classes so class 2 can enclose class 1 (got m={0})")]
    NestingNeedsTwoClasses(usize),
    #[error("{name} is outside its unit range: {value}")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("scribble coverage must be in (0, 0.5], got {0}")]
    Coverage(f64),
    #[error("expected mode {expected:?}, spec has {found:?}")]
    WrongMode { expected: PhantomMode, found: PhantomMode },
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.height < 16 || self.width < 16 {
            return Err(PhantomError::TooSmall {
                height: self.height,
                width: self.width,
            });
        }
        if !(1..=8).contains(&self.num_classes) {
            return Err(PhantomError::ClassCount(self.num_classes));
        }
        if self.num_classes < 2 {
            return Err(PhantomError::NestingNeedsTwoClasses(self.num_classes));
        }
        for (name, value, closed) in [
            ("noise_sigma", self.noise_sigma, false),
            ("bias_field_strength", self.bias_field_strength, true),
            ("shape_jitter", self.shape_jitter, true),
        ] {
            let ok = value >= 0.0 && (value < 1.0 || (closed && value == 1.0));
            if !ok {
                return Err(PhantomError::OutOfRange { name, value });
            }
        }
        if !(self.scribble_coverage > 0.0 && self.scribble_coverage <= 0.5) {
            return Err(PhantomError::Coverage(self.scribble_coverage));
        }
        Ok(())
    }

    /// Number of pathology classes carved in pathology mode (the last ones).
    pub fn pathology_classes(&self) -> usize {
        match self.mode {
            PhantomMode::Structure => 0,
            PhantomMode::Pathology => self.num_classes.saturating_sub(2).min(3),
        }
    }

    /// The structure spec whose samples serve as pathology hosts.
    pub fn host_spec(&self) -> PhantomSpec {
        PhantomSpec {
            num_classes: self.num_classes - self.pathology_classes(),
            mode: PhantomMode::Structure,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: Image,
    pub labels: LabelMap,
    pub scribbles: LabelMap,
    /// Foreground class ids occurring in `labels`, ascending.
    pub present_classes: Vec<u8>,
}

impl PhantomSample {
    /// The same sample with every scribble removed.
    pub fn without_scribbles(&self) -> PhantomSample {
        PhantomSample {
            scribbles: LabelMap::new(self.labels.height(), self.labels.width(), UNLABELED),
            ..self.clone()
        }
    }
}

/// Dataset splits in generation order.
pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const TAG_SPLIT: u64 = 0x5e11;

/// Seed of sample `index` of split number `split` for a dataset seeded `base`.
pub fn split_sample_seed(base: u64, split: usize, index: usize) -> u64 {
    derive_seed(base, &[TAG_SPLIT, split as u64, index as u64])
}

/// Generates `count` samples of split number `split`, returning each with its
/// seed. Splits draw from disjoint seed streams.
pub fn generate_split(
    spec: &PhantomSpec,
    base: u64,
    split: usize,
    count: usize,
) -> Result<Vec<(u64, PhantomSample)>, PhantomError> {
    (0..count)
        .map(|i| {
            let seed = split_sample_seed(base, split, i);
            generate(spec, seed).map(|s| (seed, s))
        })
        .collect()
}

/// Foreground classes present in `labels`.
pub fn present_classes(labels: &LabelMap) -> Vec<u8> {
    let set: BTreeSet<u8> = labels.data().iter().copied().filter(|&c| c != 0).collect();
    set.into_iter().collect()
}

/// Dispatches on `spec.mode`.
pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<PhantomSample, PhantomError> {
    match spec.mode {
        PhantomMode::Structure => gen_structure_sample(spec, seed),
        PhantomMode::Pathology => gen_pathology_sample(spec, seed),
    }
}

pub fn gen_structure_sample(spec: &PhantomSpec, seed: u64) -> Result<PhantomSample, PhantomError> {
    if spec.mode != PhantomMode::Structure {
        return Err(PhantomError::WrongMode {
            expected: PhantomMode::Structure,
            found: spec.mode,
        });
    }
    spec.validate()?;
    let labels = structure_labels(spec, &mut rng_for(seed, &[STREAM_GEOMETRY]));
    Ok(finish(spec, labels, seed))
}

pub fn gen_pathology_sample(spec: &PhantomSpec, seed: u64) -> Result<PhantomSample, PhantomError> {
    if spec.mode != PhantomMode::Pathology {
        return Err(PhantomError::WrongMode {
            expected: PhantomMode::Pathology,
            found: spec.mode,
        });
    }
    spec.validate()?;
    let host = spec.host_spec();
    let mut labels = structure_labels(&host, &mut rng_for(seed, &[STREAM_GEOMETRY]));
    let first = host.num_classes as u8 + 1;
    let mut rng = rng_for(seed, &[STREAM_PATHOLOGY]);
    for k in 0..spec.pathology_classes() as u8 {
        if rng.random::<f64>() < PATHOLOGY_PRESENCE {
            carve_blob(&mut labels, first + k, &mut rng);
        }
    }
    Ok(finish(spec, labels, seed))
}

fn finish(spec: &PhantomSpec, labels: LabelMap, seed: u64) -> PhantomSample {
    let image = render(spec, &labels, &mut rng_for(seed, &[STREAM_RENDER]));
    let scribbles = synthesize_scribbles(
        &labels,
        spec.scribble_coverage,
        crate::rng::derive_seed(seed, &[STREAM_SCRIBBLE]),
    )
    .scribbles;
    let present_classes = present_classes(&labels);
    PhantomSample {
        image,
        labels,
        scribbles,
        present_classes,
    }
}

/// Radial profile `r(φ) = r0 (1 + Σ a_k sin(kφ + p_k))`.
struct Contour {
    radius: f64,
    harmonics: [(f64, f64, f64); 2],
}

impl Contour {
    fn sample(radius: f64, jitter: f64, rng: &mut Rng) -> Self {
        let mut h = [(0.0, 0.0, 0.0); 2];
        for (i, slot) in h.iter_mut().enumerate() {
            let amp = jitter * rng.random_range(0.0..0.10);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            *slot = ((i + 2) as f64, amp, phase);
        }
        Self { radius, harmonics: h }
    }

    fn at(&self, phi: f64) -> f64 {
        let wobble: f64 = self.harmonics.iter().map(|&(k, a, p)| a * (k * phi + p).sin()).sum();
        self.radius * (1.0 + wobble)
    }
}

fn structure_labels(spec: &PhantomSpec, rng: &mut Rng) -> LabelMap {
    let (h, w) = (spec.height, spec.width);
    let s = h.min(w) as f64;
    let jitter = spec.shape_jitter;
    let cy = h as f64 / 2.0 + rng.random_range(-0.06..0.06) * s;
    let cx = w as f64 / 2.0 + rng.random_range(-0.06..0.06) * s;
    let ey = 1.0 + jitter * rng.random_range(-0.15..0.15);
    let ex = 1.0 + jitter * rng.random_range(-0.15..0.15);
    let r_inner = s * rng.random_range(0.12..0.16);
    let thickness = (s * rng.random_range(0.05..0.07)).max(2.5);
    let inner = Contour::sample(r_inner, jitter, rng);
    let outer = Contour::sample(r_inner + thickness, jitter, rng);
    let min_gap = 2.5;

    let polar = |r: usize, c: usize| {
        let dy = (r as f64 + 0.5 - cy) / ey;
        let dx = (c as f64 + 0.5 - cx) / ex;
        (dy.hypot(dx), dy.atan2(dx))
    };
    let outer_at = |phi: f64| outer.at(phi).max(inner.at(phi) + min_gap);

    let mut labels = LabelMap::from_fn(h, w, |r, c| {
        let (rho, phi) = polar(r, c);
        if rho <= inner.at(phi) {
            1
        } else if rho <= outer_at(phi) {
            2
        } else {
            0
        }
    });

    if spec.num_classes >= 3 {
        // Crescent: a disk offset towards one side, minus everything inside
        // the annulus' outer contour.
        let angle = std::f64::consts::PI + rng.random_range(-0.5..0.5);
        let r_outer = r_inner + thickness;
        let offset = r_outer * rng.random_range(0.75..0.95);
        let rv_cy = cy + offset * angle.sin() * ey;
        let rv_cx = cx + offset * angle.cos() * ex;
        let rv_r = r_outer * rng.random_range(1.0..1.2);
        for r in 0..h {
            for c in 0..w {
                let (rho, phi) = polar(r, c);
                let d = (r as f64 + 0.5 - rv_cy).hypot(c as f64 + 0.5 - rv_cx);
                if d <= rv_r && rho > outer_at(phi) {
                    labels.set(r, c, 3);
                }
            }
        }
    }

    for class in 4..=spec.num_classes as u8 {
        place_ellipse(&mut labels, class, s, rng);
    }
    labels
}

/// Places a disjoint ellipse with one free pixel of margin; gives up silently
/// (class absent) when no room is found.
fn place_ellipse(labels: &mut LabelMap, class: u8, s: f64, rng: &mut Rng) {
    let (h, w) = labels.shape();
    let mut scale = 1.0;
    for attempt in 0..300 {
        if attempt % 60 == 59 {
            scale *= 0.7;
        }
        let ry = (s * rng.random_range(0.05..0.09) * scale).max(1.0);
        let rx = (s * rng.random_range(0.05..0.09) * scale).max(1.0);
        let cy = rng.random_range(ry + 1.0..(h as f64 - ry - 1.0).max(ry + 1.5));
        let cx = rng.random_range(rx + 1.0..(w as f64 - rx - 1.0).max(rx + 1.5));
        let inside = |r: usize, c: usize, grow: f64| {
            let dy = (r as f64 + 0.5 - cy) / (ry + grow);
            let dx = (c as f64 + 0.5 - cx) / (rx + grow);
            dy * dy + dx * dx <= 1.0
        };
        let mut pixels = Vec::new();
        let mut clear = true;
        'scan: for r in 0..h {
            for c in 0..w {
                if inside(r, c, 1.5) && labels.get(r, c) != 0 {
                    clear = false;
                    break 'scan;
                }
                if inside(r, c, 0.0) {
                    pixels.push((r, c));
                }
            }
        }
        if clear && !pixels.is_empty() {
            for (r, c) in pixels {
                labels.set(r, c, class);
            }
            return;
        }
    }
}

/// Random-walk blob inside the annulus (class 2), dilated once within it.
fn carve_blob(labels: &mut LabelMap, class: u8, rng: &mut Rng) {
    let (h, w) = labels.shape();
    let annulus: Vec<usize> = (0..labels.len()).filter(|&i| labels.data()[i] == 2).collect();
    if annulus.len() < 3 {
        return;
    }
    let steps = ((annulus.len() as f64) * rng.random_range(0.04..0.12)).round().max(2.0) as usize;
    let mut pos = annulus[rng.random_range(0..annulus.len())];
    let mut blob = BTreeSet::from([pos]);
    for _ in 0..steps {
        let (r, c) = ((pos / w) as isize, (pos % w) as isize);
        let (dr, dc) = [(0, 1), (1, 0), (0, -1), (-1, 0)][rng.random_range(0..4)];
        let (nr, nc) = (r + dr, c + dc);
        if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
            let next = nr as usize * w + nc as usize;
            if labels.data()[next] == 2 {
                pos = next;
                blob.insert(pos);
            }
        }
    }
    let mut grown = blob.clone();
    for &p in &blob {
        let (r, c) = (p / w, p % w);
        for (nr, nc) in neighbors4(r, c, h, w) {
            if labels.get(nr, nc) == 2 {
                grown.insert(nr * w + nc);
            }
        }
    }
    for p in grown {
        labels.data_mut()[p] = class;
    }
}

pub(crate) fn neighbors4(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
    cand.into_iter().filter(move |&(a, b)| a < h && b < w)
}

/// Base intensity per class id.
pub fn class_level(class: u8, spec: &PhantomSpec) -> f64 {
    const STRUCTURE: [f64; 9] = [0.12, 0.82, 0.34, 0.70, 0.52, 0.60, 0.44, 0.66, 0.26];
    const PATHOLOGY: [f64; 3] = [0.97, 0.56, 0.46];
    let host = spec.num_classes - spec.pathology_classes();
    if (class as usize) > host {
        PATHOLOGY[(class as usize - host - 1).min(2)]
    } else {
        STRUCTURE[class as usize]
    }
}

fn render(spec: &PhantomSpec, labels: &LabelMap, rng: &mut Rng) -> Image {
    let (h, w) = labels.shape();
    let coeffs: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let norm = coeffs.iter().map(|c| c.abs()).sum::<f64>().max(1e-12);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("sigma is finite");
    let mut image = Image::new(h, w, 0.0);
    for r in 0..h {
        let v = 2.0 * (r as f64 + 0.5) / h as f64 - 1.0;
        for c in 0..w {
            let u = 2.0 * (c as f64 + 0.5) / w as f64 - 1.0;
            let field = (coeffs[0] * u + coeffs[1] * v + coeffs[2] * u * v + coeffs[3] * (u * u - 1.0 / 3.0)) / norm;
            let bias = 1.0 + spec.bias_field_strength * 0.5 * field;
            let mut x = class_level(labels.get(r, c), spec) * bias;
            if spec.noise_sigma > 0.0 {
                x += noise.sample(rng);
            }
            image.set(r, c, quantize(x.clamp(0.0, 1.0)));
        }
    }
    image
}

/// Snaps an intensity to the 16-bit grid used on disk so files round-trip.
#[inline]
pub fn quantize(x: f64) -> f64 {
    (x * 65535.0).round() / 65535.0
}

/// Flood fill (4-connected) from class-1 pixels through everything except
/// class 2; true when background is never reached.
pub fn class_one_enclosed(labels: &LabelMap) -> bool {
    let (h, w) = labels.shape();
    let mut seen = vec![false; labels.len()];
    let mut queue: VecDeque<usize> = (0..labels.len()).filter(|&i| labels.data()[i] == 1).collect();
    for &i in &queue {
        seen[i] = true;
    }
    while let Some(p) = queue.pop_front() {
        let (r, c) = (p / w, p % w);
        if labels.data()[p] == 0 {
            return false;
        }
        if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
            // Leaving the frame counts as reaching background.
            return false;
        }
        for (nr, nc) in neighbors4(r, c, h, w) {
            let q = nr * w + nc;
            if !seen[q] && labels.data()[q] != 2 {
                seen[q] = true;
                queue.push_back(q);
            }
        }
    }
    true
}
