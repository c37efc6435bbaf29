//! Discriminative proposal harvesting.
//!
//! Each attention map is binarized with Otsu's method, split into
//! 8-connected regions, and every region's bounding box is scored by the
//! frozen classifier on a copy of the image whose outside-the-box area is
//! Gaussian-blurred. The best `P` proposals above a minimum score survive and
//! one of them is drawn uniformly at random.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionStack, Classifier};
use crate::error::{invalid_input, invalid_param, DipsError, Result};
use crate::image::{BBox, Map, Mask, RgbImage};

pub const OTSU_BINS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestConfig {
    /// Minimum connected-region size `S_m`, in pixels.
    pub min_region_size: usize,
    /// Number of proposals kept after ranking (`P`).
    pub top_p: usize,
    pub min_score: f64,
    pub blur_sigma: f64,
    pub rng_seed: u64,
}

impl HarvestConfig {
    /// Defaults scaled to the image: `S_m` = 1% of the area, `P` = 3,
    /// minimum score `1/K`, blur σ = 5 px per 224 px of image side.
    pub fn for_image(width: usize, height: usize, num_classes: usize) -> Self {
        Self {
            min_region_size: ((width * height) as f64 * 0.01).ceil().max(1.0) as usize,
            top_p: 3,
            min_score: 1.0 / num_classes.max(1) as f64,
            blur_sigma: default_blur_sigma(width, height),
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_p == 0 {
            return Err(invalid_param("top_p must be at least 1"));
        }
        if self.min_region_size == 0 {
            return Err(invalid_param("minimum region size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(invalid_param("min_score must lie in [0, 1]"));
        }
        if !(self.blur_sigma > 0.0) {
            return Err(invalid_param("blur sigma must be positive"));
        }
        Ok(())
    }
}

pub fn default_blur_sigma(width: usize, height: usize) -> f64 {
    5.0 * (width + height) as f64 / (2.0 * 224.0)
}

/// A scored candidate region of one attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub map_index: usize,
    pub bbox: BBox,
    pub region_mask: Mask,
    pub area_px: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarvestOutcome {
    pub selected: Proposal,
    pub top_p: Vec<Proposal>,
    /// No proposal survived and the whole image was used instead.
    pub fallback: bool,
    /// Maps that were constant and treated as one region.
    pub degenerate_maps: usize,
}

/// A connected foreground region.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub mask: Mask,
    pub bbox: BBox,
    pub area: usize,
}

fn otsu_bins(map: &Map) -> Result<(Vec<usize>, f64, f64)> {
    if map.is_empty() {
        return Err(invalid_input("empty attention map"));
    }
    if !map.is_finite() {
        return Err(invalid_input("attention map contains non-finite values"));
    }
    let (lo, hi) = map.min_max();
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(DipsError::Degenerate("map is constant".into()));
    }
    let bins = map
        .data()
        .iter()
        .map(|&v| (((v - lo) / range * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1))
        .collect();
    Ok((bins, lo, hi))
}

/// Bin index `k` maximizing between-class variance of `{bin ≤ k}` vs
/// `{bin > k}`; the first maximum wins.
fn otsu_split(bins: &[usize]) -> Result<usize> {
    let mut hist = [0usize; OTSU_BINS];
    for &b in bins {
        hist[b] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(DipsError::Degenerate("map occupies a single histogram bin".into()));
    }
    let total = bins.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| (i * c) as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best_k, mut best_var) = (0, f64::NEG_INFINITY);
    for (k, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += count as f64;
        sum0 += (k * count) as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best_var {
            best_var = between;
            best_k = k;
        }
    }
    Ok(best_k)
}

/// Otsu threshold on the 256-bin histogram of the min-max normalized map,
/// expressed in the map's own units. Pixels `>= threshold` are foreground.
///
/// A constant map yields [`DipsError::Degenerate`].
pub fn otsu_threshold(map: &Map) -> Result<f64> {
    let (bins, lo, hi) = otsu_bins(map)?;
    let k = otsu_split(&bins)?;
    Ok(lo + (k + 1) as f64 / OTSU_BINS as f64 * (hi - lo))
}

/// Foreground mask of the Otsu split (computed on bin indices, so it agrees
/// exactly with the histogram partition).
pub fn otsu_binarize(map: &Map) -> Result<Mask> {
    let (bins, _, _) = otsu_bins(map)?;
    let k = otsu_split(&bins)?;
    Mask::from_vec(map.width(), map.height(), bins.into_iter().map(|b| b > k).collect())
}

struct Component {
    start: usize,
    pixels: Vec<usize>,
    bbox: BBox,
}

fn components(binary: &Mask, min_size: usize) -> Vec<Component> {
    let (w, h) = (binary.width(), binary.height());
    let mut seen = vec![false; w * h];
    let mut found = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || !binary.data()[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (x, y) = (i % w, i / w);
            (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    let j = ny * w + nx;
                    if !seen[j] && binary.data()[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if pixels.len() >= min_size {
            found.push(Component {
                start,
                pixels,
                bbox: BBox::new_unchecked(x0, y0, x1, y1),
            });
        }
    }
    found.sort_by(|a, b| {
        b.pixels
            .len()
            .cmp(&a.pixels.len())
            .then(a.bbox.y_min.cmp(&b.bbox.y_min))
            .then(a.bbox.x_min.cmp(&b.bbox.x_min))
            .then(a.start.cmp(&b.start))
    });
    found
}

/// 8-connected components with at least `min_size` pixels, ordered by area
/// (descending), then top edge, then left edge, then first raster pixel.
pub fn connected_regions(binary: &Mask, min_size: usize) -> Vec<Region> {
    components(binary, min_size)
        .into_iter()
        .map(|c| {
            let mut mask = Mask::filled(binary.width(), binary.height(), false);
            for &i in &c.pixels {
                mask.data_mut()[i] = true;
            }
            Region {
                mask,
                bbox: c.bbox,
                area: c.pixels.len(),
            }
        })
        .collect()
}

/// Boxes and areas of all components, in the order of [`connected_regions`].
pub fn component_boxes(binary: &Mask) -> Vec<(BBox, usize)> {
    components(binary, 1)
        .into_iter()
        .map(|c| (c.bbox, c.pixels.len()))
        .collect()
}

/// Gaussian-blur everything outside `bbox`; pixels inside stay bit-identical.
pub fn blur_outside_box(image: &RgbImage, bbox: BBox, blur_sigma: f64) -> Result<RgbImage> {
    if !bbox.fits_in(image.width(), image.height()) || bbox.area() == 0 {
        return Err(invalid_input(format!("box {bbox:?} does not fit the image")));
    }
    if bbox == BBox::full(image.width(), image.height()) {
        return Ok(image.clone());
    }
    if !(blur_sigma > 0.0) {
        return Err(invalid_param("blur sigma must be positive"));
    }
    let mut out = image.gaussian_blur(blur_sigma);
    for y in bbox.y_min..bbox.y_max {
        for x in bbox.x_min..bbox.x_max {
            out.set_pixel(x, y, image.pixel(x, y));
        }
    }
    Ok(out)
}

/// Extracts, scores and ranks proposals from every map of `stack`, then draws
/// the selected one from the survivors using `cfg.rng_seed`.
pub fn harvest_proposals(
    image: &RgbImage,
    stack: &AttentionStack,
    class_index: usize,
    classifier: &dyn Classifier,
    cfg: &HarvestConfig,
) -> Result<HarvestOutcome> {
    cfg.validate()?;
    if !image.same_shape(&stack.average) {
        return Err(invalid_input("attention stack and image differ in shape"));
    }
    if class_index >= classifier.num_classes() {
        return Err(invalid_input(format!("class index {class_index} out of range")));
    }
    let (w, h) = (image.width(), image.height());
    let mut degenerate_maps = 0;
    let mut scores: HashMap<BBox, f64> = HashMap::new();
    let mut candidates = Vec::new();
    for (map_index, map) in stack.iter().enumerate() {
        let binary = match otsu_binarize(map) {
            Ok(b) => b,
            Err(DipsError::Degenerate(_)) => {
                degenerate_maps += 1;
                Mask::filled(w, h, true)
            }
            Err(e) => return Err(e),
        };
        for region in connected_regions(&binary, cfg.min_region_size) {
            let score = match scores.get(&region.bbox) {
                Some(&s) => s,
                None => {
                    let blurred = blur_outside_box(image, region.bbox, cfg.blur_sigma)?;
                    let s = classifier.classify(&blurred, class_index)?;
                    scores.insert(region.bbox, s);
                    s
                }
            };
            if !score.is_finite() {
                return Err(invalid_input("classifier returned a non-finite score"));
            }
            candidates.push(Proposal {
                map_index,
                bbox: region.bbox,
                area_px: region.area,
                region_mask: region.mask,
                score,
            });
        }
    }

    let mut survivors: Vec<Proposal> = candidates.into_iter().filter(|p| p.score >= cfg.min_score).collect();
    // Stable sort: equal scores keep map order, then region order.
    survivors.sort_by(|a, b| b.score.total_cmp(&a.score));
    survivors.truncate(cfg.top_p);

    if survivors.is_empty() {
        let whole = Proposal {
            map_index: stack.average_index(),
            bbox: BBox::full(w, h),
            region_mask: Mask::filled(w, h, true),
            area_px: w * h,
            score: classifier.classify(image, class_index)?,
        };
        return Ok(HarvestOutcome {
            selected: whole.clone(),
            top_p: vec![whole],
            fallback: true,
            degenerate_maps,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let pick = rng.random_range(0..survivors.len());
    Ok(HarvestOutcome {
        selected: survivors[pick].clone(),
        top_p: survivors,
        fallback: false,
        degenerate_maps,
    })
}

/// Compact record of a harvest, used for the on-disk cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub map_index: usize,
    pub bbox: BBox,
    pub area_px: usize,
    pub score: f64,
    /// Run lengths of the region mask in raster order, starting with a
    /// background run.
    pub mask_runs: Vec<usize>,
}

impl From<&Proposal> for ProposalRecord {
    fn from(p: &Proposal) -> Self {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &v in p.region_mask.data() {
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        Self {
            map_index: p.map_index,
            bbox: p.bbox,
            area_px: p.area_px,
            score: p.score,
            mask_runs: runs,
        }
    }
}

impl ProposalRecord {
    pub fn to_proposal(&self, width: usize, height: usize) -> Result<Proposal> {
        let mut data = Vec::with_capacity(width * height);
        let mut value = false;
        for &run in &self.mask_runs {
            data.extend(std::iter::repeat_n(value, run));
            value = !value;
        }
        Ok(Proposal {
            map_index: self.map_index,
            bbox: self.bbox,
            region_mask: Mask::from_vec(width, height, data)?,
            area_px: self.area_px,
            score: self.score,
        })
    }
}
