//! Frozen attention and classifier providers.
//!
//! The pipeline consumes two frozen models: an attention source producing
//! per-head class-token attention maps, and an image classifier. Both sit
//! behind traits so that the synthetic providers used for desk-scale runs and
//! the pretrained vision-transformer adapter are interchangeable.

mod synthetic;
mod vit;

pub use synthetic::{
    Palette, SyntheticAttention, SyntheticAttentionConfig, SyntheticClassifier, SyntheticClassifierConfig,
    SyntheticMode,
};
pub use vit::{resolve_checkpoint_path, VitBackbone, VitClassifier};

use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, DipsError, Result};
use crate::image::{Map, Mask, RgbImage};

/// Geometry of a patch-based transformer backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub temperature: f64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.num_blocks == 0 || self.embed_dim == 0 {
            return Err(invalid_param("patch size, block count and embed dim must be positive"));
        }
        if self.num_heads == 0 {
            return Err(invalid_param("backbone needs at least one head"));
        }
        if !self.input_width.is_multiple_of(self.patch_size) || !self.input_height.is_multiple_of(self.patch_size) {
            return Err(invalid_param(format!(
                "input {}x{} is not divisible by patch size {}",
                self.input_width, self.input_height, self.patch_size
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid_param("temperature must be positive"));
        }
        Ok(())
    }

    pub fn grid_width(&self) -> usize {
        self.input_width / self.patch_size
    }

    pub fn grid_height(&self) -> usize {
        self.input_height / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_width() * self.grid_height()
    }
}

/// Per-head attention maps at image resolution.
///
/// `maps` holds the selected heads, `average` the mean over every head of the
/// backbone. Map indices used by proposals run over `maps` first and then
/// the average, see [`AttentionStack::map`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub maps: Vec<Map>,
    pub average: Map,
    pub source_ids: Vec<String>,
}

impl AttentionStack {
    /// Number of addressable maps (selected heads plus the average).
    pub fn len(&self) -> usize {
        self.maps.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn map(&self, index: usize) -> &Map {
        if index < self.maps.len() {
            &self.maps[index]
        } else {
            &self.average
        }
    }

    pub fn average_index(&self) -> usize {
        self.maps.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Map> {
        self.maps.iter().chain(std::iter::once(&self.average))
    }

    pub fn width(&self) -> usize {
        self.average.width()
    }

    pub fn height(&self) -> usize {
        self.average.height()
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_ids.len() != self.len() {
            return Err(invalid_input("attention stack ids do not match map count"));
        }
        for m in self.iter() {
            if !m.same_shape(&self.average) {
                return Err(invalid_input("attention maps differ in shape"));
            }
            if m.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(invalid_input("attention maps must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// What an attention provider sees for one image.
///
/// Pretrained adapters only read `image`. The synthetic provider derives its
/// maps from the ground-truth target mask and the clutter mask, and draws its
/// noise from `seed`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInput<'a> {
    pub image: &'a RgbImage,
    pub target_mask: Option<&'a Mask>,
    pub clutter_mask: Option<&'a Mask>,
    pub seed: u64,
}

impl<'a> AttentionInput<'a> {
    pub fn image_only(image: &'a RgbImage) -> Self {
        Self {
            image,
            target_mask: None,
            clutter_mask: None,
            seed: 0,
        }
    }
}

pub trait AttentionProvider: Send + Sync {
    fn config(&self) -> &BackboneConfig;

    fn attention_stack(&self, input: &AttentionInput<'_>) -> Result<AttentionStack>;

    /// Digest of every parameter the provider reads; must never change.
    fn weights_digest(&self) -> [u8; 32];
}

/// Logits and their tempered softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ClassifierOutput {
    pub fn from_logits(logits: Vec<f64>, temperature: f64) -> Result<Self> {
        let probabilities = softmax_with_temperature(&logits, temperature)?;
        Ok(Self { logits, probabilities })
    }

    /// Class indices sorted by descending probability (ties by index).
    pub fn ranking(&self) -> Vec<usize> {
        rank_scores(&self.probabilities)
    }
}

pub(crate) fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    fn temperature(&self) -> f64;

    fn logits(&self, image: &RgbImage) -> Result<Vec<f64>>;

    fn output(&self, image: &RgbImage) -> Result<ClassifierOutput> {
        ClassifierOutput::from_logits(self.logits(image)?, self.temperature())
    }

    /// Confidence `p[class_index]` for one class.
    fn classify(&self, image: &RgbImage, class_index: usize) -> Result<f64> {
        if class_index >= self.num_classes() {
            return Err(invalid_input(format!(
                "class index {class_index} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(self.output(image)?.probabilities[class_index])
    }

    /// Cross-entropy `-log p[class_index]` and its gradient w.r.t. every
    /// input channel value. Classifiers that cannot differentiate through
    /// their input report [`DipsError::Unsupported`].
    fn cross_entropy_with_input_grad(&self, _image: &RgbImage, _class_index: usize) -> Result<(f64, RgbImage)> {
        Err(DipsError::Unsupported(
            "classifier does not expose input gradients".into(),
        ))
    }

    fn supports_input_grad(&self) -> bool {
        false
    }

    fn weights_digest(&self) -> [u8; 32];
}

/// `exp(s/τ) / Σ exp(s_k/τ)`, computed with max subtraction.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid_param(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(invalid_input("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid_input("softmax input contains non-finite values"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&s| ((s - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        for tau in [0.1, 1.0, 7.0] {
            let p = softmax_with_temperature(&[2.5, 2.5, 2.5], tau).unwrap();
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_two_logits() {
        let p = softmax_with_temperature(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.7311).abs() < 1e-4);
        assert!((p[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax_with_temperature(&[1000.0, 0.0], 1.0).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert!(matches!(
            softmax_with_temperature(&[f64::NAN, 0.0], 1.0),
            Err(DipsError::InvalidInput(_))
        ));
        assert!(matches!(
            softmax_with_temperature(&[1.0, 0.0], 0.0),
            Err(DipsError::InvalidParameter(_))
        ));
        assert!(matches!(
            softmax_with_temperature(&[1.0, 0.0], -2.0),
            Err(DipsError::InvalidParameter(_))
        ));
    }

    #[test]
    fn backbone_config_rejects_indivisible_input() {
        let cfg = BackboneConfig {
            patch_size: 16,
            num_blocks: 12,
            embed_dim: 384,
            num_heads: 6,
            input_width: 225,
            input_height: 224,
            temperature: 1.0,
        };
        assert!(cfg.validate().is_err());
        let ok = BackboneConfig {
            input_width: 224,
            ..cfg
        };
        ok.validate().unwrap();
        assert_eq!(ok.num_patches(), 196);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_permutation_equivariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..12),
            tau in 0.05f64..10.0,
            rot in 0usize..12,
        ) {
            let p = softmax_with_temperature(&logits, tau).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));

            let k = rot % logits.len();
            let mut rotated = logits.clone();
            rotated.rotate_left(k);
            let mut expected = p.clone();
            expected.rotate_left(k);
            let q = softmax_with_temperature(&rotated, tau).unwrap();
            for (a, b) in q.iter().zip(&expected) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_monotone_in_logits(
            logits in prop::collection::vec(-20.0f64..20.0, 2..8),
            tau in 0.1f64..5.0,
        ) {
            let p = softmax_with_temperature(&logits, tau).unwrap();
            for i in 0..logits.len() {
                for j in 0..logits.len() {
                    if logits[i] > logits[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }
    }
}
