//! Square grayscale images and the resampling primitives shared by the
//! dataset generator and training-time augmentation.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("pixel buffer holds {got} values, side {side} needs {need}")]
    BadLength { side: usize, got: usize, need: usize },
}

/// Row-major square grayscale image; values live in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn zeros(side: usize) -> Self {
        Image {
            side,
            pixels: vec![0.0; side * side],
        }
    }

    pub fn from_pixels(side: usize, pixels: Vec<f32>) -> Result<Self, ImageError> {
        if pixels.len() != side * side {
            return Err(ImageError::BadLength {
                side,
                got: pixels.len(),
                need: side * side,
            });
        }
        Ok(Image { side, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.pixels[row * self.side + col] = value;
    }

    /// Bilinear sample at continuous coordinates (pixel centers at integer
    /// positions). Coordinates are clamped to the image, extending edge
    /// pixels outward.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> f32 {
        let max = (self.side - 1) as f64;
        let y = y.clamp(0.0, max);
        let x = x.clamp(0.0, max);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(self.side - 1);
        let x1 = (x0 + 1).min(self.side - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = self.get(y0, x0) as f64 * (1.0 - fx) + self.get(y0, x1) as f64 * fx;
        let bottom = self.get(y1, x0) as f64 * (1.0 - fx) + self.get(y1, x1) as f64 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    }

    /// Inverse-warps through a 2x3 affine map: output pixel (r, c) takes the
    /// bilinear sample at `m · (c, r, 1)` in input coordinates.
    pub fn warp_affine(&self, m: &[[f64; 3]; 2]) -> Image {
        let mut out = Image::zeros(self.side);
        for r in 0..self.side {
            for c in 0..self.side {
                let x = m[0][0] * c as f64 + m[0][1] * r as f64 + m[0][2];
                let y = m[1][0] * c as f64 + m[1][1] * r as f64 + m[1][2];
                out.set(r, c, self.sample_bilinear(y, x));
            }
        }
        out
    }

    /// Bilinear resize to a new side length (half-pixel center alignment).
    pub fn resize(&self, new_side: usize) -> Image {
        if new_side == self.side {
            return self.clone();
        }
        let scale = self.side as f64 / new_side as f64;
        let mut out = Image::zeros(new_side);
        for r in 0..new_side {
            for c in 0..new_side {
                let y = (r as f64 + 0.5) * scale - 0.5;
                let x = (c as f64 + 0.5) * scale - 0.5;
                out.set(r, c, self.sample_bilinear(y, x));
            }
        }
        out
    }

    pub fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ramp(side: usize) -> Image {
        let pixels = (0..side * side)
            .map(|i| i as f32 / (side * side - 1) as f32)
            .collect();
        Image::from_pixels(side, pixels).unwrap()
    }

    #[test]
    fn from_pixels_checks_length() {
        assert!(Image::from_pixels(4, vec![0.0; 15]).is_err());
        assert!(Image::from_pixels(4, vec![0.0; 16]).is_ok());
    }

    #[test]
    fn bilinear_exact_at_integer_coordinates() {
        let img = ramp(8);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(img.sample_bilinear(r as f64, c as f64), img.get(r, c));
            }
        }
    }

    #[test]
    fn bilinear_midpoint_averages_neighbors() {
        let img = ramp(8);
        let want = 0.5 * (img.get(3, 4) + img.get(3, 5));
        assert_abs_diff_eq!(img.sample_bilinear(3.0, 4.5), want, epsilon = 1e-6);
    }

    #[test]
    fn bilinear_clamps_outside_coordinates() {
        let img = ramp(4);
        assert_eq!(img.sample_bilinear(-3.0, -3.0), img.get(0, 0));
        assert_eq!(img.sample_bilinear(10.0, 10.0), img.get(3, 3));
    }

    #[test]
    fn identity_warp_preserves_image() {
        let img = ramp(8);
        let identity = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let out = img.warp_affine(&identity);
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn integer_translation_shifts_content() {
        let mut img = Image::zeros(8);
        img.set(4, 4, 1.0);
        // Output (r,c) samples input at (c+1, r). Content moves left by 1.
        let shift = [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let out = img.warp_affine(&shift);
        assert_eq!(out.get(4, 3), 1.0);
        assert_eq!(out.get(4, 4), 0.0);
    }

    #[test]
    fn resize_same_side_is_identity() {
        let img = ramp(8);
        assert_eq!(img.resize(8), img);
    }

    #[test]
    fn resize_roughly_preserves_mean() {
        let img = ramp(16);
        let up = img.resize(32);
        let mean = |i: &Image| i.pixels().iter().map(|&p| p as f64).sum::<f64>()
            / i.pixels().len() as f64;
        assert_abs_diff_eq!(mean(&img), mean(&up), epsilon = 0.01);
        assert_eq!(up.side(), 32);
    }
}
