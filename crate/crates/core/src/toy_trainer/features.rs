//! Fixed per-pixel feature bank standing in for a learned backbone.

use crate::grid::Grid;

/// Box-blur radii of the two smoothing channels.
pub const BLUR_RADII: [usize; 2] = [2, 6];
/// intensity, two box blurs, gradient magnitude, constant 1.
pub const N_FEATURES: usize = 5;

/// `K × H × W` features, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    k: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureStack {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.n_pixels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Feature vector of one pixel, written into `out`.
    pub fn pixel_into(&self, px: usize, out: &mut [f64]) {
        let n = self.n_pixels();
        for (c, o) in out.iter_mut().enumerate().take(self.k) {
            *o = self.data[c * n + px];
        }
    }

    /// Pixel-major copy (`H·W × K`), convenient for inner loops.
    pub fn pixel_major(&self) -> Vec<f64> {
        let n = self.n_pixels();
        let mut out = vec![0.0; n * self.k];
        for c in 0..self.k {
            for px in 0..n {
                out[px * self.k + c] = self.data[c * n + px];
            }
        }
        out
    }
}

/// Mean over the `(2r+1)²` window clipped to the image.
pub fn box_blur(image: &Grid<f64>, radius: usize) -> Grid<f64> {
    let (w, h) = image.dims();
    // summed-area table with a zero border row/column
    let mut sat = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += image[(x, y)];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    Grid::from_fn(w, h, |x, y| {
        let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
        s / ((x1 - x0) * (y1 - y0)) as f64
    })
}

/// Central-difference gradient magnitude with replicated borders.
pub fn gradient_magnitude(image: &Grid<f64>) -> Grid<f64> {
    let (w, h) = image.dims();
    Grid::from_fn(w, h, |x, y| {
        let gx = (image[((x + 1).min(w - 1), y)] - image[(x.saturating_sub(1), y)]) / 2.0;
        let gy = (image[(x, (y + 1).min(h - 1))] - image[(x, y.saturating_sub(1))]) / 2.0;
        gx.hypot(gy)
    })
}

pub fn extract_features(image: &Grid<f64>) -> FeatureStack {
    let (width, height) = image.dims();
    let mut data = Vec::with_capacity(N_FEATURES * width * height);
    data.extend_from_slice(image.as_slice());
    for r in BLUR_RADII {
        data.extend_from_slice(box_blur(image, r).as_slice());
    }
    data.extend_from_slice(gradient_magnitude(image).as_slice());
    data.extend(std::iter::repeat_n(1.0, width * height));
    FeatureStack {
        k: N_FEATURES,
        width,
        height,
        data,
    }
}
