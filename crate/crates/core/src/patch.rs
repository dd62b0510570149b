//! Contrast-defined patch grids: block averages of a binary shape mask.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("patch size {patch} does not divide image size {size}")]
    Indivisible { size: usize, patch: usize },
    #[error("patch extraction needs a square image, got {0}×{1}")]
    NotSquare(usize, usize),
    #[error("grid needs {expected} values, got {found}")]
    Length { expected: usize, found: usize },
}

/// `g × g` grid of values in `[0, 1]`, flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    side: usize,
    values: Vec<f32>,
}

impl PatchGrid {
    /// Builds a grid, clipping values to `[0, 1]`.
    pub fn new(side: usize, values: Vec<f32>) -> Result<Self, PatchError> {
        if values.len() != side * side {
            return Err(PatchError::Length {
                expected: side * side,
                found: values.len(),
            });
        }
        Ok(Self {
            side,
            values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.side + col]
    }

    /// Nearest-neighbour block replication to `side·m` pixels.
    pub fn upsample(&self, m: usize) -> Image {
        let size = self.side * m;
        let mut pixels = vec![0f32; size * size];
        for y in 0..size {
            for x in 0..size {
                pixels[y * size + x] = self.values[(y / m) * self.side + x / m];
            }
        }
        Image::square(size, pixels).expect("size matches")
    }
}

/// Averages non-overlapping `m × m` blocks of `mask`.
pub fn extract_patch_features(mask: &Image, m: usize) -> Result<PatchGrid, PatchError> {
    if !mask.is_square() {
        return Err(PatchError::NotSquare(mask.width(), mask.height()));
    }
    let size = mask.size();
    if m == 0 || size % m != 0 {
        return Err(PatchError::Indivisible { size, patch: m });
    }
    let side = size / m;
    let mut values = vec![0f32; side * side];
    for (r, row) in values.chunks_mut(side).enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let mut s = 0f64;
            for y in r * m..(r + 1) * m {
                for x in c * m..(c + 1) * m {
                    s += mask.get(x, y) as f64;
                }
            }
            *cell = (s / (m * m) as f64) as f32;
        }
    }
    PatchGrid::new(side, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_masks() {
        let ones = extract_patch_features(&Image::filled(32, 32, 1.0), 8).unwrap();
        assert_eq!(ones.side(), 4);
        assert!(ones.values().iter().all(|&v| v == 1.0));
        let zeros = extract_patch_features(&Image::filled(32, 32, 0.0), 8).unwrap();
        assert!(zeros.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn half_filled_block() {
        let mut mask = Image::filled(16, 16, 0.0);
        // 32 of the 64 pixels of block (0, 1)
        for y in 0..4 {
            for x in 8..16 {
                mask.set(x, y, 1.0);
            }
        }
        let grid = extract_patch_features(&mask, 8).unwrap();
        assert_eq!(grid.get(0, 1), 0.5);
        assert_eq!(grid.get(0, 0), 0.0);
    }

    #[test]
    fn indivisible_size_is_rejected() {
        assert_eq!(
            extract_patch_features(&Image::filled(20, 20, 0.0), 8),
            Err(PatchError::Indivisible { size: 20, patch: 8 })
        );
    }

    #[test]
    fn upsampling_replicates_blocks() {
        let grid = PatchGrid::new(2, vec![0.1, 0.2, 0.3, 1.4]).unwrap();
        assert_eq!(grid.get(1, 1), 1.0);
        let im = grid.upsample(3);
        assert_eq!(im.size(), 6);
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(im.get(x, y), grid.get(y / 3, x / 3));
            }
        }
    }
}
