//! End-to-end orchestration: provider construction, per-item proposal
//! harvesting and pseudo-labelling, training, inference, evaluation and
//! ablations.

pub mod ablate;
pub mod augment;
pub mod evaluate;
pub mod infer;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{
    resolve_checkpoint_path, AttentionInput, AttentionProvider, Classifier, SyntheticAttention, SyntheticClassifier,
    SyntheticClassifierConfig, VitBackbone, VitClassifier,
};
use crate::config::{BackboneSection, ClassifierSection, Provider, RunConfig};
use crate::data::{load_all, DatasetInfo, Manifest, Sample};
use crate::error::{DipsError, Result};
use crate::harvest::{harvest_proposals, HarvestConfig, ProposalRecord};
use crate::image::{Grid, RgbImage};
use crate::sampler::{build_pseudo_labels, Label, PseudoLabelMap, SamplerConfig};
use crate::seed::{derive_seed, rng_for, Stream};
use augment::Geometry;

fn config_err(msg: impl Into<String>) -> DipsError {
    DipsError::Config(msg.into())
}

pub fn build_classifier(cfg: &ClassifierSection, info: &DatasetInfo) -> Result<Box<dyn Classifier>> {
    let classifier: Box<dyn Classifier> = match cfg.provider {
        Provider::Synthetic => Box::new(SyntheticClassifier::new(SyntheticClassifierConfig::new(
            info.num_classes,
        ))?),
        Provider::Pretrained => {
            let path = cfg
                .checkpoint
                .as_deref()
                .ok_or_else(|| config_err("classifier.checkpoint is required for the pretrained classifier"))?;
            Box::new(VitClassifier::load(
                &resolve_checkpoint_path(path),
                cfg.num_heads,
                info.image_width,
                info.image_height,
            )?)
        }
    };
    if classifier.num_classes() != info.num_classes {
        return Err(config_err(format!(
            "classifier has {} classes but the dataset has {}",
            classifier.num_classes(),
            info.num_classes
        )));
    }
    Ok(classifier)
}

pub fn build_attention(cfg: &BackboneSection, info: &DatasetInfo) -> Result<Box<dyn AttentionProvider>> {
    let provider: Box<dyn AttentionProvider> = match cfg.provider {
        Provider::Synthetic => Box::new(
            SyntheticAttention::new(cfg.synthetic_config(), info.image_width, info.image_height)
                .map_err(|e| config_err(e.to_string()))?,
        ),
        Provider::Pretrained => {
            let path = cfg
                .checkpoint
                .as_deref()
                .ok_or_else(|| config_err("backbone.checkpoint is required for the pretrained backbone"))?;
            Box::new(VitBackbone::load(
                &resolve_checkpoint_path(path),
                cfg.num_heads,
                cfg.selected_heads,
                info.image_width,
                info.image_height,
            )?)
        }
    };
    Ok(provider)
}

/// Loads the named split and checks it against the dataset description.
pub fn load_split(cfg: &RunConfig, info: &DatasetInfo, split: &str) -> Result<Vec<Sample>> {
    let path = cfg.data.split_path(split);
    if !path.exists() {
        return Err(config_err(format!("manifest {} does not exist", path.display())));
    }
    let manifest = Manifest::read(&path)?;
    manifest.check_unique_ids()?;
    let samples = load_all(&manifest)?;
    for s in &samples {
        if s.class_index >= info.num_classes {
            return Err(config_err(format!("{}: class {} out of range", s.id, s.class_index)));
        }
        if (s.image.width(), s.image.height()) != (info.image_width, info.image_height) {
            return Err(config_err(format!(
                "{}: image is {}x{}, expected {}x{}",
                s.id,
                s.image.width(),
                s.image.height(),
                info.image_width,
                info.image_height
            )));
        }
    }
    Ok(samples)
}

pub fn dataset_info(cfg: &RunConfig) -> Result<DatasetInfo> {
    if !cfg.data.dir.is_dir() {
        return Err(config_err(format!(
            "dataset directory {} does not exist",
            cfg.data.dir.display()
        )));
    }
    DatasetInfo::read(&cfg.data.dir)
}

/// Harvest result of one item, in the form stored in the proposal cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestRecord {
    pub image_id: String,
    pub epoch: u64,
    pub selected: ProposalRecord,
    pub top_p: Vec<ProposalRecord>,
    pub fallback: bool,
    pub degenerate_maps: usize,
}

impl HarvestRecord {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

pub fn harvest_cache_path(dir: &Path, epoch: u64, image_id: &str) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}")).join(format!("{image_id}.json"))
}

/// Everything [`prepare_item`] needs besides the sample itself.
pub struct ItemContext<'a> {
    pub cfg: &'a RunConfig,
    pub attention: &'a dyn AttentionProvider,
    pub classifier: &'a dyn Classifier,
    pub harvest: HarvestConfig,
    pub sampler: SamplerConfig,
}

impl<'a> ItemContext<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        info: &DatasetInfo,
        attention: &'a dyn AttentionProvider,
        classifier: &'a dyn Classifier,
    ) -> Result<Self> {
        let bc = attention.config();
        if (bc.input_width, bc.input_height) != (info.image_width, info.image_height) {
            return Err(config_err("backbone input size differs from the dataset images"));
        }
        Ok(Self {
            cfg,
            attention,
            classifier,
            harvest: cfg
                .harvest
                .resolve(info.image_width, info.image_height, info.num_classes)?,
            sampler: cfg.sampler.resolve(info.image_width, info.image_height)?,
        })
    }

    pub fn geometry(&self, sample: &Sample, index: u64, epoch: u64) -> Geometry {
        let (w, h) = (sample.image.width(), sample.image.height());
        if !self.cfg.train.augment {
            return Geometry::identity(w, h);
        }
        let t = &self.cfg.train;
        let mut rng = rng_for(t.seed, Stream::Augment, index, epoch);
        Geometry::random(w, h, t.resize_side(w), t.resize_side(h), &mut rng)
    }
}

/// One training item after augmentation, harvesting and sampling.
#[derive(Clone, Debug)]
pub struct PreparedItem {
    /// The image the network is trained on.
    pub image: RgbImage,
    pub labels: PseudoLabelMap,
    pub harvest: HarvestRecord,
}

/// Proposal harvest for one item; the image is the one the attention saw.
pub fn harvest_item(
    ctx: &ItemContext<'_>,
    sample: &Sample,
    index: u64,
    epoch: u64,
) -> Result<(
    RgbImage,
    crate::backbone::AttentionStack,
    HarvestRecord,
    crate::harvest::Proposal,
)> {
    let after = ctx.cfg.sampler.after_augmentation;
    let geometry = ctx.geometry(sample, index, epoch);
    let (image, mask, clutter) = if after {
        (
            geometry.apply_image(&sample.image),
            sample.mask.as_ref().map(|m| geometry.apply_mask(m)),
            sample.clutter.as_ref().map(|m| geometry.apply_mask(m)),
        )
    } else {
        (sample.image.clone(), sample.mask.clone(), sample.clutter.clone())
    };
    let stack = ctx.attention.attention_stack(&AttentionInput {
        image: &image,
        target_mask: mask.as_ref(),
        clutter_mask: clutter.as_ref(),
        seed: derive_seed(ctx.cfg.train.seed, Stream::Attention, index, epoch),
    })?;
    let cached = ctx
        .cfg
        .train
        .harvest_cache
        .as_ref()
        .map(|dir| harvest_cache_path(dir, epoch, &sample.id))
        .filter(|p| p.exists());
    let record = match cached {
        Some(p) => {
            let record: HarvestRecord = serde_json::from_slice(&fs::read(&p)?)?;
            if record.image_id != sample.id || record.epoch != epoch {
                return Err(DipsError::Dataset(format!(
                    "proposal cache {} is for another item",
                    p.display()
                )));
            }
            record
        }
        None => {
            let hcfg = HarvestConfig {
                rng_seed: derive_seed(ctx.cfg.harvest.seed, Stream::Harvest, index, epoch),
                ..ctx.harvest.clone()
            };
            let outcome = harvest_proposals(&image, &stack, sample.class_index, ctx.classifier, &hcfg)?;
            HarvestRecord {
                image_id: sample.id.clone(),
                epoch,
                selected: (&outcome.selected).into(),
                top_p: outcome.top_p.iter().map(Into::into).collect(),
                fallback: outcome.fallback,
                degenerate_maps: outcome.degenerate_maps,
            }
        }
    };
    let selected = record.selected.to_proposal(image.width(), image.height())?;
    Ok((image, stack, record, selected))
}

pub fn prepare_item(ctx: &ItemContext<'_>, sample: &Sample, index: u64, epoch: u64) -> Result<PreparedItem> {
    let (image, stack, harvest, selected) = harvest_item(ctx, sample, index, epoch)?;
    let scfg = SamplerConfig {
        rng_seed: derive_seed(ctx.cfg.sampler.seed, Stream::Sampler, index, epoch),
        ..ctx.sampler.clone()
    };
    let labels = build_pseudo_labels(stack.map(selected.map_index), selected.bbox, &scfg)?;
    if ctx.cfg.sampler.after_augmentation {
        return Ok(PreparedItem { image, labels, harvest });
    }
    let geometry = ctx.geometry(sample, index, epoch);
    Ok(PreparedItem {
        image: geometry.apply_image(&image),
        labels: transform_labels(&labels, &geometry),
        harvest,
    })
}

/// Moves labelled pixels through an augmentation, dropping those cropped
/// away. Two labels landing on one pixel keep the first in raster order.
pub fn transform_labels(labels: &PseudoLabelMap, g: &Geometry) -> PseudoLabelMap {
    let w = labels.width();
    let mut grid = Grid::filled(g.width, g.height, Label::Ignore);
    let (mut fg, mut bg) = (Vec::new(), Vec::new());
    let mut moved: Vec<(usize, Label)> = labels
        .fg_pixels
        .iter()
        .map(|&i| (i, Label::Foreground))
        .chain(labels.bg_pixels.iter().map(|&i| (i, Label::Background)))
        .collect();
    moved.sort_by_key(|&(i, _)| i);
    for (i, label) in moved {
        let Some((x, y)) = g.map_point(i % w, i / w) else {
            continue;
        };
        if *grid.get(x, y) != Label::Ignore {
            continue;
        }
        grid.set(x, y, label);
        let j = y * g.width + x;
        if label == Label::Foreground {
            fg.push(j);
        } else {
            bg.push(j);
        }
    }
    PseudoLabelMap {
        labels: grid,
        fg_pixels: fg,
        bg_pixels: bg,
        clipped: labels.clipped,
        uniform_fallback: labels.uniform_fallback,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_transform_keeps_labels() {
        let mut grid = Grid::filled(4, 4, Label::Ignore);
        grid.set(1, 1, Label::Foreground);
        grid.set(3, 0, Label::Background);
        let labels = PseudoLabelMap {
            labels: grid,
            fg_pixels: vec![5],
            bg_pixels: vec![3],
            clipped: false,
            uniform_fallback: false,
        };
        assert_eq!(transform_labels(&labels, &Geometry::identity(4, 4)), labels);
        let flipped = Geometry {
            flip: true,
            ..Geometry::identity(4, 4)
        };
        assert_eq!(transform_labels(&labels, &flipped), labels.flip_horizontal());
    }
}
