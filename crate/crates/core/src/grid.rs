//! Dense 2-D grids and stacks of planes.

use serde::{Deserialize, Serialize};

/// A row-major `height × width` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Grayscale intensities in `[0, 1]`.
pub type Image = Grid<f64>;
/// Per-pixel class ids (labels or scribbles).
pub type LabelMap = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, fill: T) -> Self {
        Self {
            height,
            width,
            data: vec![fill; height * width],
        }
    }

    /// Wraps `data`; returns `None` when the length does not match the shape.
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == height * width).then_some(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the sub-rectangle `[row0, row1) × [col0, col1)`.
    pub fn crop(&self, row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        assert!(row0 < row1 && row1 <= self.height && col0 < col1 && col1 <= self.width);
        let mut data = Vec::with_capacity((row1 - row0) * (col1 - col0));
        for r in row0..row1 {
            data.extend_from_slice(&self.data[r * self.width + col0..r * self.width + col1]);
        }
        Self {
            height: row1 - row0,
            width: col1 - col0,
            data,
        }
    }
}

/// `channels × height × width` values stored plane after plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Planes {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Planes {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == channels * height * width).then_some(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_image(image: &Image) -> Self {
        Self {
            channels: 1,
            height: image.height(),
            width: image.width(),
            data: image.data().to_vec(),
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// Pixels per plane.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn same_shape(&self, other: &Planes) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Stacks the planes of `self` followed by the planes of `other`.
    pub fn concat(&self, other: &Planes) -> Planes {
        assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Planes {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Splits after the first `first` planes.
    pub fn split_at(&self, first: usize) -> (Planes, Planes) {
        let cut = first * self.plane_len();
        (
            Planes {
                channels: first,
                height: self.height,
                width: self.width,
                data: self.data[..cut].to_vec(),
            },
            Planes {
                channels: self.channels - first,
                height: self.height,
                width: self.width,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_copies_the_requested_window() {
        let g = Grid::from_fn(4, 5, |r, c| (r * 10 + c) as u8);
        let c = g.crop(1, 2, 3, 5);
        assert_eq!(c.shape(), (2, 3));
        assert_eq!(c.data(), &[12, 13, 14, 22, 23, 24]);
    }

    #[test]
    fn planes_concat_then_split_is_identity() {
        let a = Planes::from_vec(2, 2, 2, (0..8).map(f64::from).collect()).unwrap();
        let b = Planes::from_vec(1, 2, 2, vec![9.0; 4]).unwrap();
        let (x, y) = a.concat(&b).split_at(2);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Grid::from_vec(2, 2, vec![0u8; 3]).is_none());
        assert!(Planes::from_vec(1, 2, 2, vec![0.0; 5]).is_none());
    }
}
