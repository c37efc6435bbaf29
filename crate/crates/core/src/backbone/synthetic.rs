//! Deterministic stand-ins for the frozen transformer and classifier.
//!
//! The synthetic attention provider mimics last-block class-token attention:
//! several heads each light up part of the target object, one head lights up
//! a distractor, and every head is computed on a coarse patch grid, blurred,
//! perturbed with half-normal noise and bilinearly upsampled.
//!
//! The synthetic classifier recognises each class by a pair of prototype
//! colours laid out as a fine checkerboard. Its per-class evidence is the
//! soft count of pixels matching either prototype; blurring destroys the
//! checkerboard and with it the evidence, so the score tracks how much of the
//! target remains visible.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AttentionInput, AttentionProvider, AttentionStack, BackboneConfig, Classifier, ClassifierOutput};
use crate::error::{invalid_input, invalid_param, DipsError, Result};
use crate::image::{BBox, Map, Mask, RgbImage};

/// Colours used by the synthetic dataset and recognised by the synthetic
/// classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    classes: Vec<[[f64; 3]; 2]>,
    clutter: Vec<[f64; 3]>,
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Palette {
    pub fn new(num_classes: usize) -> Self {
        let classes = (0..num_classes)
            .map(|k| {
                let hue = 15.0 + 360.0 * k as f64 / num_classes as f64;
                [hsv_to_rgb(hue, 0.85, 0.95), hsv_to_rgb(hue + 180.0, 0.85, 0.5)]
            })
            .collect();
        let clutter = (0..4).map(|j| hsv_to_rgb(45.0 + 90.0 * j as f64, 0.3, 0.8)).collect();
        Self { classes, clutter }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_colors(&self, class: usize) -> [[f64; 3]; 2] {
        self.classes[class]
    }

    pub fn clutter_colors(&self) -> &[[f64; 3]] {
        &self.clutter
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticMode {
    /// Heads derived from the ground-truth target and clutter masks.
    MaskDerived,
    /// Uninformative heads made of noise only.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticAttentionConfig {
    pub num_heads: usize,
    pub selected_heads: usize,
    pub noise_sigma: f64,
    pub distractor_count: usize,
    pub patch_size: usize,
    /// Lower bound on the per-axis fraction of the target box a head covers.
    pub min_subregion_frac: f64,
    /// Blur applied on the patch grid, in patches.
    pub patch_blur: f64,
    pub mode: SyntheticMode,
}

impl Default for SyntheticAttentionConfig {
    fn default() -> Self {
        Self {
            num_heads: 6,
            selected_heads: 4,
            noise_sigma: 0.05,
            distractor_count: 1,
            patch_size: 4,
            min_subregion_frac: 0.55,
            patch_blur: 0.6,
            mode: SyntheticMode::MaskDerived,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticAttention {
    cfg: SyntheticAttentionConfig,
    backbone: BackboneConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum HeadKind {
    Target,
    Distractor,
}

impl SyntheticAttention {
    pub fn new(cfg: SyntheticAttentionConfig, width: usize, height: usize) -> Result<Self> {
        if cfg.selected_heads == 0 || cfg.selected_heads > cfg.num_heads {
            return Err(invalid_param("selected heads must be in 1..=num_heads"));
        }
        if cfg.distractor_count >= cfg.num_heads {
            return Err(invalid_param("need at least one target-derived head"));
        }
        if !(cfg.noise_sigma >= 0.0) || !(cfg.min_subregion_frac > 0.0 && cfg.min_subregion_frac <= 1.0) {
            return Err(invalid_param(
                "noise sigma must be >= 0 and sub-region fraction in (0, 1]",
            ));
        }
        let backbone = BackboneConfig {
            patch_size: cfg.patch_size,
            num_blocks: 1,
            embed_dim: 1,
            num_heads: cfg.num_heads,
            input_width: width,
            input_height: height,
            temperature: 1.0,
        };
        backbone.validate()?;
        Ok(Self { cfg, backbone })
    }

    pub fn synthetic_config(&self) -> &SyntheticAttentionConfig {
        &self.cfg
    }

    fn head_region(&self, kind: HeadKind, target: &Mask, clutter: Option<&Mask>, rng: &mut ChaCha8Rng) -> Mask {
        let (w, h) = (target.width(), target.height());
        match kind {
            HeadKind::Target => {
                let Some(tb) = target.tight_box() else {
                    return target.clone();
                };
                let sub = random_sub_box(tb, self.cfg.min_subregion_frac, rng);
                let region = Mask::from_fn(w, h, |x, y| *target.get(x, y) && sub.contains(x, y));
                if region.count() == 0 {
                    target.clone()
                } else {
                    region
                }
            }
            HeadKind::Distractor => {
                if let Some(c) = clutter.filter(|c| c.count() > 0) {
                    return c.clone();
                }
                // No clutter object: attend to a random background blob.
                let r = 0.1 * w.min(h) as f64 + 1.0;
                let cx = rng.random_range(0.0..w as f64);
                let cy = rng.random_range(0.0..h as f64);
                Mask::from_fn(w, h, |x, y| {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    dx * dx + dy * dy <= r * r && !*target.get(x, y)
                })
            }
        }
    }

    fn render_head(&self, region: Option<&Mask>, rng: &mut ChaCha8Rng) -> Map {
        let s = self.cfg.patch_size;
        let (gw, gh) = (self.backbone.grid_width(), self.backbone.grid_height());
        let mut grid = match region {
            Some(region) => {
                let coarse = Map::from_fn(gw, gh, |px, py| {
                    let mut hits = 0usize;
                    for y in py * s..(py + 1) * s {
                        for x in px * s..(px + 1) * s {
                            hits += usize::from(*region.get(x, y));
                        }
                    }
                    hits as f64 / (s * s) as f64
                });
                let mut blurred = if self.cfg.patch_blur > 0.0 {
                    coarse.gaussian_blur(self.cfg.patch_blur)
                } else {
                    coarse
                };
                let (_, peak) = blurred.min_max();
                if peak > 0.0 {
                    blurred.data_mut().iter_mut().for_each(|v| *v /= peak);
                }
                blurred
            }
            None => Map::filled(gw, gh, 0.0),
        };
        if self.cfg.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.cfg.noise_sigma).expect("validated sigma");
            for v in grid.data_mut() {
                *v += normal.sample(rng).abs();
            }
        }
        grid.resize_bilinear(self.backbone.input_width, self.backbone.input_height)
    }
}

fn random_sub_box(tb: BBox, min_frac: f64, rng: &mut ChaCha8Rng) -> BBox {
    let fw = rng.random_range(min_frac..=1.0);
    let fh = rng.random_range(min_frac..=1.0);
    let sw = ((tb.width() as f64 * fw).ceil() as usize).clamp(1, tb.width());
    let sh = ((tb.height() as f64 * fh).ceil() as usize).clamp(1, tb.height());
    let x0 = tb.x_min + rng.random_range(0..=tb.width() - sw);
    let y0 = tb.y_min + rng.random_range(0..=tb.height() - sh);
    BBox::new_unchecked(x0, y0, x0 + sw, y0 + sh)
}

impl AttentionProvider for SyntheticAttention {
    fn config(&self) -> &BackboneConfig {
        &self.backbone
    }

    fn attention_stack(&self, input: &AttentionInput<'_>) -> Result<AttentionStack> {
        let (w, h) = (self.backbone.input_width, self.backbone.input_height);
        if input.image.width() != w || input.image.height() != h {
            return Err(invalid_input(format!(
                "image {}x{} does not match backbone input {w}x{h}",
                input.image.width(),
                input.image.height()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
        let mut kinds = vec![HeadKind::Target; self.cfg.num_heads - self.cfg.distractor_count];
        kinds.extend(std::iter::repeat_n(HeadKind::Distractor, self.cfg.distractor_count));
        kinds.shuffle(&mut rng);

        let heads: Vec<Map> = match self.cfg.mode {
            SyntheticMode::MaskDerived => {
                let target = input
                    .target_mask
                    .ok_or_else(|| DipsError::Config("mask-derived synthetic attention needs a target mask".into()))?;
                if !input.image.same_shape(target) {
                    return Err(invalid_input("target mask does not match image"));
                }
                kinds
                    .iter()
                    .map(|&kind| {
                        let region = self.head_region(kind, target, input.clutter_mask, &mut rng);
                        self.render_head(Some(&region), &mut rng)
                    })
                    .collect()
            }
            SyntheticMode::Noise => kinds.iter().map(|_| self.render_head(None, &mut rng)).collect(),
        };

        let mut average = Map::filled(w, h, 0.0);
        for head in &heads {
            for (a, v) in average.data_mut().iter_mut().zip(head.data()) {
                *a += v;
            }
        }
        let n = heads.len() as f64;
        average.data_mut().iter_mut().for_each(|a| *a /= n);

        let mut source_ids: Vec<String> = (0..self.cfg.selected_heads).map(|i| format!("head{i}")).collect();
        source_ids.push("mean".into());
        let maps = heads.into_iter().take(self.cfg.selected_heads).collect();
        Ok(AttentionStack {
            maps,
            average,
            source_ids,
        })
    }

    /// The generator has no weights; its configuration stands in for them.
    fn weights_digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(&self.cfg).expect("config serializes");
        Sha256::digest(bytes).into()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClassifierConfig {
    pub num_classes: usize,
    /// Bandwidth of the prototype colour match.
    pub color_sigma: f64,
    /// Matched-pixel count (as a fraction of image area) at which the
    /// visibility score reaches `1 - 1/e` of its range.
    pub nominal_area_frac: f64,
    pub epsilon: f64,
    pub temperature: f64,
}

impl SyntheticClassifierConfig {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            color_sigma: 0.08,
            nominal_area_frac: 0.035,
            epsilon: 0.01,
            temperature: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticClassifier {
    cfg: SyntheticClassifierConfig,
    palette: Palette,
}

struct Evidence {
    counts: Vec<f64>,
    logits: Vec<f64>,
}

impl SyntheticClassifier {
    pub fn new(cfg: SyntheticClassifierConfig) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(invalid_param("classifier needs at least two classes"));
        }
        if !(cfg.color_sigma > 0.0 && cfg.nominal_area_frac > 0.0 && cfg.temperature > 0.0) {
            return Err(invalid_param("classifier bandwidths and temperature must be positive"));
        }
        if !(cfg.epsilon > 0.0 && cfg.epsilon < 0.5) {
            return Err(invalid_param("epsilon must be in (0, 0.5)"));
        }
        let palette = Palette::new(cfg.num_classes);
        Ok(Self { cfg, palette })
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    #[inline]
    fn match_weight(&self, px: &[f64], proto: &[f64; 3]) -> f64 {
        let d2 = (px[0] - proto[0]).powi(2) + (px[1] - proto[1]).powi(2) + (px[2] - proto[2]).powi(2);
        (-d2 / (2.0 * self.cfg.color_sigma * self.cfg.color_sigma)).exp()
    }

    fn nominal_area(&self, image: &RgbImage) -> f64 {
        self.cfg.nominal_area_frac * (image.width() * image.height()) as f64
    }

    fn evidence(&self, image: &RgbImage) -> Evidence {
        let k = self.cfg.num_classes;
        let mut counts = vec![0.0; k];
        for px in image.data().chunks_exact(3) {
            for (class, count) in counts.iter_mut().enumerate() {
                let [a, b] = self.palette.class_colors(class);
                *count += self.match_weight(px, &a) + self.match_weight(px, &b);
            }
        }
        let area = self.nominal_area(image);
        let eps = self.cfg.epsilon;
        let logits = counts
            .iter()
            .map(|&c| eps + (1.0 - 2.0 * eps) * (1.0 - (-c / area).exp()))
            .collect();
        Evidence { counts, logits }
    }

    /// Visible-target score in `[ε, 1-ε]` for each class (the raw logits).
    pub fn visibility(&self, image: &RgbImage) -> Vec<f64> {
        self.evidence(image).logits
    }
}

impl Classifier for SyntheticClassifier {
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn temperature(&self) -> f64 {
        self.cfg.temperature
    }

    fn logits(&self, image: &RgbImage) -> Result<Vec<f64>> {
        if !image.is_finite() {
            return Err(invalid_input("image contains non-finite values"));
        }
        Ok(self.evidence(image).logits)
    }

    fn cross_entropy_with_input_grad(&self, image: &RgbImage, class_index: usize) -> Result<(f64, RgbImage)> {
        if class_index >= self.cfg.num_classes {
            return Err(invalid_input(format!("class index {class_index} out of range")));
        }
        if !image.is_finite() {
            return Err(invalid_input("image contains non-finite values"));
        }
        let ev = self.evidence(image);
        let out = ClassifierOutput::from_logits(ev.logits, self.cfg.temperature)?;
        let loss = -out.probabilities[class_index].max(f64::MIN_POSITIVE).ln();

        let area = self.nominal_area(image);
        let eps = self.cfg.epsilon;
        let tau = self.cfg.temperature;
        let sigma2 = self.cfg.color_sigma * self.cfg.color_sigma;
        // dL/dc_k through the tempered softmax and the saturating score.
        let weights: Vec<f64> = (0..self.cfg.num_classes)
            .map(|k| {
                let target = if k == class_index { 1.0 } else { 0.0 };
                let dl_ds = (out.probabilities[k] - target) / tau;
                let ds_dc = (1.0 - 2.0 * eps) * (-ev.counts[k] / area).exp() / area;
                dl_ds * ds_dc
            })
            .collect();

        let mut grad = RgbImage::filled(image.width(), image.height(), [0.0; 3]);
        for (px, g) in image.data().chunks_exact(3).zip(grad.data_mut().chunks_exact_mut(3)) {
            for (class, &w) in weights.iter().enumerate() {
                for proto in self.palette.class_colors(class) {
                    let m = self.match_weight(px, &proto) * w / sigma2;
                    for c in 0..3 {
                        g[c] += m * (proto[c] - px[c]);
                    }
                }
            }
        }
        Ok((loss, grad))
    }

    fn supports_input_grad(&self) -> bool {
        true
    }

    /// Hash of the configuration and the colour prototypes.
    fn weights_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        hasher.update(serde_json::to_vec(&self.palette).expect("palette serializes"));
        hasher.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker_image(w: usize, h: usize, target: &Mask, palette: &Palette, class: usize) -> RgbImage {
        let [a, b] = palette.class_colors(class);
        let mut img = RgbImage::filled(w, h, [0.55, 0.55, 0.5]);
        for y in 0..h {
            for x in 0..w {
                if *target.get(x, y) {
                    img.set_pixel(x, y, if (x / 2 + y / 2) % 2 == 0 { a } else { b });
                }
            }
        }
        img
    }

    fn square_mask(w: usize, h: usize, b: BBox) -> Mask {
        Mask::from_fn(w, h, |x, y| b.contains(x, y))
    }

    #[test]
    fn palette_colors_are_separated() {
        let p = Palette::new(5);
        let mut colors: Vec<[f64; 3]> = (0..5).flat_map(|k| p.class_colors(k)).collect();
        colors.extend_from_slice(p.clutter_colors());
        for i in 0..colors.len() {
            for j in 0..i {
                let d: f64 = (0..3)
                    .map(|c| (colors[i][c] - colors[j][c]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d > 0.25, "colours {i} and {j} too close: {d}");
            }
        }
    }

    #[test]
    fn classifier_confident_on_visible_target() {
        let clf = SyntheticClassifier::new(SyntheticClassifierConfig::new(5)).unwrap();
        let mask = square_mask(64, 64, BBox::new(20, 20, 36, 36).unwrap());
        for class in 0..5 {
            let img = checker_image(64, 64, &mask, clf.palette(), class);
            let p = clf.classify(&img, class).unwrap();
            assert!(p > 0.9, "class {class}: {p}");
        }
    }

    #[test]
    fn classifier_near_uniform_when_target_blurred() {
        let clf = SyntheticClassifier::new(SyntheticClassifierConfig::new(5)).unwrap();
        let mask = square_mask(64, 64, BBox::new(20, 20, 36, 36).unwrap());
        let img = checker_image(64, 64, &mask, clf.palette(), 2);
        let blurred = img.gaussian_blur(5.0 * 64.0 / 224.0);
        let p = clf.classify(&blurred, 2).unwrap();
        assert!(p < 1.0 / 5.0 + 0.1, "{p}");
    }

    #[test]
    fn classifier_deterministic_and_range_checked() {
        let clf = SyntheticClassifier::new(SyntheticClassifierConfig::new(3)).unwrap();
        let img = RgbImage::filled(8, 8, [0.3, 0.2, 0.9]);
        assert_eq!(clf.output(&img).unwrap(), clf.output(&img).unwrap());
        assert!(matches!(clf.classify(&img, 3), Err(DipsError::InvalidInput(_))));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let clf = SyntheticClassifier::new(SyntheticClassifierConfig::new(4)).unwrap();
        let mask = square_mask(12, 12, BBox::new(3, 3, 9, 9).unwrap());
        let mut img = checker_image(12, 12, &mask, clf.palette(), 1);
        // perturb so that gradients are not vanishing everywhere
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (*v * 0.93 + 0.01 * ((i * 37 % 11) as f64 / 11.0)).clamp(0.0, 1.0);
        }
        let (_, grad) = clf.cross_entropy_with_input_grad(&img, 1).unwrap();
        let h = 1e-6;
        for i in (0..img.data().len()).step_by(7) {
            let mut plus = img.clone();
            plus.data_mut()[i] += h;
            let mut minus = img.clone();
            minus.data_mut()[i] -= h;
            let fd = (clf.cross_entropy_with_input_grad(&plus, 1).unwrap().0
                - clf.cross_entropy_with_input_grad(&minus, 1).unwrap().0)
                / (2.0 * h);
            let a = grad.data()[i];
            assert!((a - fd).abs() <= 1e-5 + 1e-4 * fd.abs(), "i={i} analytic={a} fd={fd}");
        }
    }

    fn attention_fixture() -> (RgbImage, Mask, Mask) {
        let target = Mask::from_fn(64, 64, |x, y| {
            let (dx, dy) = (x as f64 - 30.0, y as f64 - 34.0);
            dx * dx + dy * dy < 121.0
        });
        let clutter = square_mask(64, 64, BBox::new(50, 4, 60, 12).unwrap());
        (RgbImage::filled(64, 64, [0.5; 3]), target, clutter)
    }

    #[test]
    fn attention_stack_shape_and_sign() {
        let provider = SyntheticAttention::new(SyntheticAttentionConfig::default(), 64, 64).unwrap();
        let (img, target, clutter) = attention_fixture();
        let input = AttentionInput {
            image: &img,
            target_mask: Some(&target),
            clutter_mask: Some(&clutter),
            seed: 11,
        };
        let stack = provider.attention_stack(&input).unwrap();
        stack.validate().unwrap();
        assert_eq!(stack.len(), 5);
        assert_eq!(stack.source_ids.last().unwrap(), "mean");
        for m in stack.iter() {
            assert_eq!((m.width(), m.height()), (64, 64));
        }
        assert_eq!(stack, provider.attention_stack(&input).unwrap());
    }

    #[test]
    fn average_map_argmax_inside_target() {
        let provider = SyntheticAttention::new(SyntheticAttentionConfig::default(), 64, 64).unwrap();
        let (img, target, clutter) = attention_fixture();
        for seed in 0..50 {
            let input = AttentionInput {
                image: &img,
                target_mask: Some(&target),
                clutter_mask: Some(&clutter),
                seed,
            };
            let stack = provider.attention_stack(&input).unwrap();
            let (x, y) = stack.average.argmax();
            assert!(*target.get(x, y), "seed {seed}: argmax ({x},{y}) outside target");
        }
    }

    #[test]
    fn mask_derived_mode_requires_mask() {
        let provider = SyntheticAttention::new(SyntheticAttentionConfig::default(), 16, 16).unwrap();
        let img = RgbImage::filled(16, 16, [0.5; 3]);
        assert!(matches!(
            provider.attention_stack(&AttentionInput::image_only(&img)),
            Err(DipsError::Config(_))
        ));
        let wrong = RgbImage::filled(12, 16, [0.5; 3]);
        assert!(matches!(
            provider.attention_stack(&AttentionInput::image_only(&wrong)),
            Err(DipsError::InvalidInput(_))
        ));
    }
}
