//! Run configuration.
//!
//! Files are flat `section.key = value` lines (TOML dotted keys), e.g.
//!
//! ```text
//! data.dir = "runs/data"
//! harvest.top_p = 3
//! loss.lambda_crf = 2e-9
//! ```
//!
//! Keys left out take their defaults; `auto` values (written by leaving the
//! key out) are derived from the image size and class count at run start.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{SyntheticAttentionConfig, SyntheticMode};
use crate::error::{DipsError, Result};
use crate::harvest::{default_blur_sigma, HarvestConfig};
use crate::losses::{AffinityParams, CrfConfig, LossWeights};
use crate::model::{AdamConfig, ModelConfig};
use crate::sampler::{scaled_count, SamplerConfig};

fn config_err(msg: impl Into<String>) -> DipsError {
    DipsError::Config(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory holding `dataset.json` and the split manifests.
    pub dir: PathBuf,
    pub train: String,
    pub val: String,
    pub test: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            train: "train.txt".into(),
            val: "val.txt".into(),
            test: "test.txt".into(),
        }
    }
}

impl DataSection {
    pub fn split_path(&self, split: &str) -> PathBuf {
        self.dir.join(split)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provider {
    Synthetic,
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub provider: Provider,
    /// Checkpoint of the pretrained adapter; relative paths resolve against
    /// `DIPS_CACHE_DIR`.
    pub checkpoint: Option<PathBuf>,
    pub num_heads: usize,
    pub selected_heads: usize,
    pub noise_sigma: f64,
    pub distractor_count: usize,
    pub patch_size: usize,
    pub mode: SyntheticMode,
}

impl Default for BackboneSection {
    fn default() -> Self {
        let s = SyntheticAttentionConfig::default();
        Self {
            provider: Provider::Synthetic,
            checkpoint: None,
            num_heads: s.num_heads,
            selected_heads: s.selected_heads,
            noise_sigma: s.noise_sigma,
            distractor_count: s.distractor_count,
            patch_size: s.patch_size,
            mode: s.mode,
        }
    }
}

impl BackboneSection {
    pub fn synthetic_config(&self) -> SyntheticAttentionConfig {
        SyntheticAttentionConfig {
            num_heads: self.num_heads,
            selected_heads: self.selected_heads,
            noise_sigma: self.noise_sigma,
            distractor_count: self.distractor_count,
            patch_size: self.patch_size,
            mode: self.mode,
            ..SyntheticAttentionConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub provider: Provider,
    pub checkpoint: Option<PathBuf>,
    pub num_heads: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            provider: Provider::Synthetic,
            checkpoint: None,
            num_heads: 6,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarvestSection {
    pub min_region_size_frac: Option<f64>,
    pub top_p: Option<usize>,
    pub min_score: Option<f64>,
    pub blur_sigma: Option<f64>,
    pub seed: u64,
}

impl HarvestSection {
    /// Per-image config; `rng_seed` is filled in per item by the trainer.
    pub fn resolve(&self, width: usize, height: usize, num_classes: usize) -> Result<HarvestConfig> {
        let mut cfg = HarvestConfig::for_image(width, height, num_classes);
        if let Some(f) = self.min_region_size_frac {
            if !(f > 0.0 && f <= 1.0) {
                return Err(config_err("harvest.min_region_size_frac must lie in (0, 1]"));
            }
            cfg.min_region_size = ((width * height) as f64 * f).ceil().max(1.0) as usize;
        }
        cfg.top_p = self.top_p.unwrap_or(cfg.top_p);
        cfg.min_score = self.min_score.unwrap_or(cfg.min_score);
        cfg.blur_sigma = self.blur_sigma.unwrap_or_else(|| default_blur_sigma(width, height));
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub fg_top_frac: f64,
    pub bg_top_frac: f64,
    pub fg_count: Option<usize>,
    pub bg_count: Option<usize>,
    pub seed: u64,
    /// Sample pseudo-labels on the augmented image (otherwise on the raw
    /// image, with augmentation applied to the finished label map).
    pub after_augmentation: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            fg_top_frac: 0.3,
            bg_top_frac: 0.3,
            fg_count: None,
            bg_count: None,
            seed: 0,
            after_augmentation: true,
        }
    }
}

impl SamplerSection {
    pub fn resolve(&self, width: usize, height: usize) -> Result<SamplerConfig> {
        let count = scaled_count(30, width, height);
        let cfg = SamplerConfig {
            fg_top_frac: self.fg_top_frac,
            bg_top_frac: self.bg_top_frac,
            fg_count: self.fg_count.unwrap_or(count),
            bg_count: self.bg_count.unwrap_or(count),
            rng_seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder_depth: usize,
    pub base_channels: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(64, 64);
        Self {
            encoder_depth: m.encoder_depth,
            base_channels: m.base_channels,
            init_seed: m.init_seed,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, width: usize, height: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            encoder_depth: self.encoder_depth,
            base_channels: self.base_channels,
            init_seed: self.init_seed,
            ..ModelConfig::new(width, height)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrfMode {
    /// Dense up to `loss.crf_dense_max_pixels`, pooled above.
    Auto,
    Dense,
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_cls: f64,
    pub lambda_cpa: f64,
    pub lambda_crf: f64,
    pub crf_sigma_xy: f64,
    pub crf_sigma_rgb: f64,
    pub crf_mode: CrfMode,
    pub crf_dense_max_pixels: usize,
    pub crf_downsample: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let c = CrfConfig::default();
        Self {
            lambda_cls: w.lambda_cls,
            lambda_cpa: w.lambda_cpa,
            lambda_crf: w.lambda_crf,
            crf_sigma_xy: c.affinity.sigma_xy,
            crf_sigma_rgb: c.affinity.sigma_rgb,
            crf_mode: CrfMode::Auto,
            crf_dense_max_pixels: c.dense_max_pixels,
            crf_downsample: c.downsample,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> Result<LossWeights> {
        let w = LossWeights {
            lambda_cls: self.lambda_cls,
            lambda_cpa: self.lambda_cpa,
            lambda_crf: self.lambda_crf,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn crf(&self) -> CrfConfig {
        let dense_max_pixels = match self.crf_mode {
            CrfMode::Auto => self.crf_dense_max_pixels,
            CrfMode::Dense => usize::MAX,
            CrfMode::Pooled => 0,
        };
        CrfConfig {
            affinity: AffinityParams {
                sigma_xy: self.crf_sigma_xy,
                sigma_rgb: self.crf_sigma_rgb,
            },
            dense_max_pixels,
            downsample: self.crf_downsample,
        }
    }

    /// Tag naming the active terms, e.g. `cpa+crf`.
    pub fn loss_set_tag(&self) -> String {
        let mut parts = Vec::new();
        if self.lambda_cls > 0.0 {
            parts.push("cls");
        }
        if self.lambda_cpa > 0.0 {
            parts.push("cpa");
        }
        if self.lambda_crf > 0.0 {
            parts.push("crf");
        }
        parts.join("+")
    }

    /// Turns on exactly the named terms (`cls`, `cpa`, `crf`, joined by `+`);
    /// enabled terms keep their configured weight, or the default if zero.
    pub fn apply_loss_set(&mut self, set: &str) -> Result<()> {
        let d = LossSection::default();
        let mut on = [false; 3];
        for part in set.split('+').map(str::trim) {
            match part {
                "cls" => on[0] = true,
                "cpa" => on[1] = true,
                "crf" => on[2] = true,
                other => return Err(config_err(format!("unknown loss term `{other}` in `{set}`"))),
            }
        }
        let pick = |enabled: bool, current: f64, default: f64| match (enabled, current > 0.0) {
            (false, _) => 0.0,
            (true, true) => current,
            (true, false) => default,
        };
        self.lambda_cls = pick(on[0], self.lambda_cls, d.lambda_cls);
        self.lambda_cpa = pick(on[1], self.lambda_cpa, d.lambda_cpa);
        self.lambda_crf = pick(on[2], self.lambda_crf, d.lambda_crf);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    /// Epoch (0-based) from which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: 1e-3,
            decay_epoch: 15,
            decay_factor: 0.1,
            batch_size: 16,
            epochs: 30,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }
    }
}

impl OptimSection {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Seed for augmentation, shuffling and synthetic attention noise.
    pub seed: u64,
    pub augment: bool,
    /// Side the image is resized to before the random crop back to size.
    pub resize_to: Option<usize>,
    /// Validate every this many epochs (0 disables validation).
    pub val_every: usize,
    /// Optional directory of precomputed proposals.
    pub harvest_cache: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            seed: 0,
            augment: true,
            resize_to: None,
            val_every: 1,
            harvest_cache: None,
        }
    }
}

impl TrainSection {
    /// Defaults to 9/8 of the side, so 64-pixel images go through 72.
    pub fn resize_side(&self, side: usize) -> usize {
        self.resize_to.unwrap_or(side + side.div_ceil(8))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub backbone: BackboneSection,
    pub classifier: ClassifierSection,
    pub harvest: HarvestSection,
    pub sampler: SamplerSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub train: TrainSection,
}

impl RunConfig {
    /// A configuration sized for a laptop CPU: a small network, 30 labeled
    /// pixels per set and the pooled CRF.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.encoder_depth = 3;
        cfg.model.base_channels = 8;
        cfg.sampler.fg_count = Some(30);
        cfg.sampler.bg_count = Some(30);
        cfg.loss.crf_mode = CrfMode::Pooled;
        cfg
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Flat `section.key = value` text, one line per key.
    pub fn to_flat_string(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| config_err(e.to_string()))?;
        let mut out = String::new();
        if let toml::Value::Table(sections) = value {
            for (section, body) in sections {
                if let toml::Value::Table(keys) = body {
                    for (k, v) in keys {
                        out.push_str(&format!("{section}.{k} = {v}\n"));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_flat_string()?)?;
        Ok(())
    }

    /// Applies one `section.key=value` override. Values are TOML literals;
    /// bare words are taken as strings.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| config_err(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*part)
                .ok_or_else(|| config_err(format!("unknown config section in `{key}`")))?;
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{key}` does not name a config key")))?;
        table.insert(parts[parts.len() - 1].to_string(), value);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| config_err(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Applies every key of a flat config text on top of `self`, leaving
    /// keys the text does not mention untouched.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        for (section, body) in table {
            let toml::Value::Table(keys) = body else {
                return Err(config_err(format!("`{section}` is not a section.key entry")));
            };
            for (k, v) in keys {
                self.set(&format!("{section}.{k}={v}"))?;
            }
        }
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        overrides.iter().try_for_each(|o| self.set(o.as_ref()))
    }
}
