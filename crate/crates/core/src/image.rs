//! Raster containers shared across the pipeline.
//!
//! All grids are row-major. Boxes use half-open pixel coordinates:
//! `(x_min, y_min, x_max, y_max)` covers columns `x_min..x_max` and rows
//! `y_min..y_max`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Real-valued single-channel raster.
pub type Map = Grid<f64>;
/// Binary raster.
pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid_input(format!(
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
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

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
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
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
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

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Mirror left/right.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y).clone())
    }

    pub fn crop(&self, bbox: BBox) -> Self {
        Self::from_fn(bbox.width(), bbox.height(), |x, y| {
            self.get(bbox.x_min + x, bbox.y_min + y).clone()
        })
    }

    /// Nearest-neighbour resampling (pixel-centre aligned).
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Self::from_fn(width, height, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(src_x, src_y).clone()
        })
    }
}

impl Map {
    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the maximum value; first occurrence wins.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Bilinear resampling with pixel-centre alignment (no corner alignment).
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Map {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let xs: Vec<_> = (0..width).map(|x| lerp_taps(x, sx, self.width)).collect();
        let ys: Vec<_> = (0..height).map(|y| lerp_taps(y, sy, self.height)).collect();
        Map::from_fn(width, height, |x, y| {
            let (x0, x1, fx) = xs[x];
            let (y0, y1, fy) = ys[y];
            let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
            let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
    }

    pub fn gaussian_blur(&self, sigma: f64) -> Map {
        let kernel = gaussian_kernel(sigma);
        let data = blur_plane(&self.data, self.width, self.height, 1, &kernel);
        Map {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Tight bounding box of the set pixels, `None` when empty.
    pub fn tight_box(&self) -> Option<BBox> {
        let mut bbox: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if *self.get(x, y) {
                    bbox = Some(match bbox {
                        None => BBox::new_unchecked(x, y, x + 1, y + 1),
                        Some(b) => {
                            BBox::new_unchecked(b.x_min.min(x), b.y_min.min(y), b.x_max.max(x + 1), b.y_max.max(y + 1))
                        }
                    });
                }
            }
        }
        bbox
    }

    pub fn to_map(&self) -> Map {
        self.map(|&b| if b { 1.0 } else { 0.0 })
    }
}

fn lerp_taps(i: usize, scale: f64, len: usize) -> (usize, usize, f64) {
    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

/// Interleaved RGB raster with channel values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(invalid_input(format!(
                "rgb image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape<T>(&self, grid: &Grid<T>) -> bool {
        self.width == grid.width && self.height == grid.height
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Pixel-wise product with a single-channel map (`x ⊙ m`).
    pub fn masked(&self, map: &Map) -> RgbImage {
        let data = self
            .data
            .chunks_exact(3)
            .zip(map.data())
            .flat_map(|(px, &m)| [px[0] * m, px[1] * m, px[2] * m])
            .collect();
        RgbImage {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn gaussian_blur(&self, sigma: f64) -> RgbImage {
        let kernel = gaussian_kernel(sigma);
        RgbImage {
            width: self.width,
            height: self.height,
            data: blur_plane(&self.data, self.width, self.height, 3, &kernel),
        }
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> RgbImage {
        let channels: Vec<Map> = (0..3).map(|c| self.channel(c)).collect();
        let resized: Vec<Map> = channels.iter().map(|m| m.resize_bilinear(width, height)).collect();
        Self::from_channels(&resized)
    }

    pub fn crop(&self, bbox: BBox) -> RgbImage {
        let mut out = RgbImage::filled(bbox.width(), bbox.height(), [0.0; 3]);
        for y in 0..bbox.height() {
            for x in 0..bbox.width() {
                out.set_pixel(x, y, self.pixel(bbox.x_min + x, bbox.y_min + y));
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, y, self.pixel(self.width - 1 - x, y));
            }
        }
        out
    }

    pub fn channel(&self, c: usize) -> Map {
        Map::from_fn(self.width, self.height, |x, y| self.pixel(x, y)[c])
    }

    fn from_channels(channels: &[Map]) -> RgbImage {
        let (w, h) = (channels[0].width(), channels[0].height());
        let mut out = RgbImage::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(
                    x,
                    y,
                    [*channels[0].get(x, y), *channels[1].get(x, y), *channels[2].get(x, y)],
                );
            }
        }
        out
    }
}

/// Axis-aligned box in half-open pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(invalid_input(format!(
                "box ({x_min},{y_min},{x_max},{y_max}) has zero area"
            )));
        }
        Ok(Self::new_unchecked(x_min, y_min, x_max, y_max))
    }

    pub(crate) const fn new_unchecked(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::new_unchecked(0, 0, width, height)
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w * h
    }

    /// Mirror the box inside an image of the given width.
    pub fn flip_horizontal(&self, width: usize) -> BBox {
        BBox::new_unchecked(width - self.x_max, self.y_min, width - self.x_min, self.y_max)
    }
}

/// Normalised 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(0.0) as usize;
    let mut taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Symmetric reflection (`d c b a | a b c d | d c b a`) into `0..len`.
#[inline]
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

fn blur_plane(data: &[f64], width: usize, height: usize, channels: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let sx = reflect_index(x as isize + k as isize - radius, width);
                    acc += w * data[(y * width + sx) * channels + c];
                }
                tmp[(y * width + x) * channels + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let sy = reflect_index(y as isize + k as isize - radius, height);
                    acc += w * tmp[(sy * width + x) * channels + c];
                }
                out[(y * width + x) * channels + c] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_wraps_symmetrically() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn blur_preserves_constants() {
        let m = Map::filled(7, 5, 0.25);
        let b = m.gaussian_blur(2.0);
        assert!(b.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn bilinear_identity_at_same_size() {
        let m = Map::from_fn(5, 4, |x, y| (x * 7 + y) as f64);
        assert_eq!(m.resize_bilinear(5, 4), m);
    }

    #[test]
    fn bilinear_upsample_keeps_range() {
        let m = Map::from_fn(4, 4, |x, y| ((x + y) % 3) as f64);
        let up = m.resize_bilinear(16, 16);
        let (lo, hi) = up.min_max();
        assert!(lo >= 0.0 && hi <= 2.0);
    }

    #[test]
    fn tight_box_of_mask() {
        let mut m = Mask::filled(6, 6, false);
        m.set(1, 2, true);
        m.set(3, 4, true);
        assert_eq!(m.tight_box(), Some(BBox::new(1, 2, 4, 5).unwrap()));
        assert_eq!(Mask::filled(3, 3, false).tight_box(), None);
    }

    #[test]
    fn zero_area_box_rejected() {
        assert!(BBox::new(2, 2, 2, 5).is_err());
    }
}
