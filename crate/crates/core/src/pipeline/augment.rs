//! Training-time augmentation: resize up, random crop back to size, random
//! horizontal flip.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::image::{BBox, Mask, RgbImage};

/// One random resize-crop-flip, applicable to images, masks and points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    pub resized_width: usize,
    pub resized_height: usize,
    pub offset_x: usize,
    pub offset_y: usize,
    pub flip: bool,
}

impl Geometry {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            resized_width: width,
            resized_height: height,
            offset_x: 0,
            offset_y: 0,
            flip: false,
        }
    }

    pub fn random(
        width: usize,
        height: usize,
        resized_width: usize,
        resized_height: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (rw, rh) = (resized_width.max(width), resized_height.max(height));
        Self {
            width,
            height,
            resized_width: rw,
            resized_height: rh,
            offset_x: rng.random_range(0..=rw - width),
            offset_y: rng.random_range(0..=rh - height),
            flip: rng.random_bool(0.5),
        }
    }

    fn crop_box(&self) -> BBox {
        BBox::new(
            self.offset_x,
            self.offset_y,
            self.offset_x + self.width,
            self.offset_y + self.height,
        )
        .expect("crop has positive size")
    }

    pub fn apply_image(&self, image: &RgbImage) -> RgbImage {
        let resized = if (self.resized_width, self.resized_height) == (image.width(), image.height()) {
            image.clone()
        } else {
            image.resize_bilinear(self.resized_width, self.resized_height)
        };
        let out = resized.crop(self.crop_box());
        if self.flip {
            out.flip_horizontal()
        } else {
            out
        }
    }

    pub fn apply_mask(&self, mask: &Mask) -> Mask {
        let resized = if (self.resized_width, self.resized_height) == (mask.width(), mask.height()) {
            mask.clone()
        } else {
            mask.to_map()
                .resize_bilinear(self.resized_width, self.resized_height)
                .map(|&v| v >= 0.5)
        };
        let out = resized.crop(self.crop_box());
        if self.flip {
            out.flip_horizontal()
        } else {
            out
        }
    }

    /// Where the original pixel `(x, y)` lands, if inside the crop.
    pub fn map_point(&self, x: usize, y: usize) -> Option<(usize, usize)> {
        let sx = ((x as f64 + 0.5) * self.resized_width as f64 / self.width as f64).floor() as usize;
        let sy = ((y as f64 + 0.5) * self.resized_height as f64 / self.height as f64).floor() as usize;
        if sx < self.offset_x || sy < self.offset_y {
            return None;
        }
        let (cx, cy) = (sx - self.offset_x, sy - self.offset_y);
        if cx >= self.width || cy >= self.height {
            return None;
        }
        Some((if self.flip { self.width - 1 - cx } else { cx }, cy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_is_a_no_op() {
        let g = Geometry::identity(5, 4);
        let img = RgbImage::from_vec(5, 4, (0..60).map(|i| i as f64 / 60.0).collect()).unwrap();
        assert_eq!(g.apply_image(&img), img);
        assert_eq!(g.map_point(3, 2), Some((3, 2)));
    }

    #[test]
    fn crop_and_flip_agree_between_masks_and_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = Geometry::random(16, 16, 16, 16, &mut rng);
            let mut m = Mask::filled(16, 16, false);
            m.set(4, 9, true);
            let out = g.apply_mask(&m);
            let (x, y) = g.map_point(4, 9).unwrap();
            assert!(*out.get(x, y));
            assert_eq!(out.count(), 1);
        }
        let g = Geometry::random(64, 64, 72, 72, &mut rng);
        let out = g.apply_image(&RgbImage::filled(64, 64, [0.2, 0.4, 0.6]));
        assert_eq!((out.width(), out.height()), (64, 64));
        assert!(out.data().chunks_exact(3).all(|p| (p[0] - 0.2).abs() < 1e-12));
    }
}
