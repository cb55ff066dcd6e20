//! Row-major 2-D grids shared by masks, label maps, loss maps and images.

use std::ops::{Index, IndexMut};

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("dimension mismatch: expected {expected:?}, found {found:?}")]
pub struct DimensionMismatch {
    /// (width, height) of the reference grid.
    pub expected: (usize, usize),
    pub found: (usize, usize),
}

/// A `height × width` grid stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Pseudo masks, probability maps and per-pixel losses. Mask weights live in
/// `[0, 1]`; producers in this crate uphold that.
pub type MaskGrid = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    /// Wraps `data` (row-major). Returns `None` when the length does not match.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == width * height).then_some(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Option<&T> {
        (x < self.width && y < self.height).then(|| &self.data[y * self.width + x])
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn check_same_dims<U>(&self, other: &Grid<U>) -> Result<(), DimensionMismatch> {
        if self.dims() == other.dims() {
            Ok(())
        } else {
            Err(DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            })
        }
    }
}

impl Grid<f64> {
    /// Number of strictly positive cells.
    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&w| w > 0.0).count()
    }

    /// 1.0 where the cell is strictly positive, 0.0 elsewhere.
    pub fn binarized(&self) -> Grid<f64> {
        self.map(|&w| if w > 0.0 { 1.0 } else { 0.0 })
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    fn index(&self, (x, y): (usize, usize)) -> &T {
        assert!(x < self.width && y < self.height, "grid index out of bounds");
        &self.data[y * self.width + x]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (x, y): (usize, usize)) -> &mut T {
        assert!(x < self.width && y < self.height, "grid index out of bounds");
        &mut self.data[y * self.width + x]
    }
}
