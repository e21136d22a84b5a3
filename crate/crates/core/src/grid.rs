//! Plain 2-D raster containers for images and masks.
//!
//! These carry no gradient machinery; they are the currency of the data
//! pipeline and the evaluation metrics. Row-major layout, `(row, col)`
//! indexing.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Binary mask: `true` is foreground.
pub type Mask = Grid<bool>;

/// Grayscale image with values in `[0, 1]`.
pub type Gray = Grid<f32>;

impl<T: Copy + Default> Grid<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Grid {
            height,
            width,
            data: vec![T::default(); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "grid data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        debug_assert!(row < self.height && col < self.width);
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Mask {
    /// Number of foreground pixels.
    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Foreground pixels that touch the background 4-adjacently or lie on the
    /// image border, in row-major order.
    pub fn boundary_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if !self.get(r, c) {
                    continue;
                }
                let on_border =
                    r == 0 || c == 0 || r + 1 == self.height || c + 1 == self.width;
                let touches_background = !on_border
                    && (!self.get(r - 1, c)
                        || !self.get(r + 1, c)
                        || !self.get(r, c - 1)
                        || !self.get(r, c + 1));
                if on_border || touches_background {
                    out.push((r, c));
                }
            }
        }
        out
    }
}
