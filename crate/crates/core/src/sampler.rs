//! Sparse foreground/background pseudo-pixel sampling.
//!
//! Foreground pixels are drawn without replacement from the most active
//! fraction of the selected box, with probability proportional to activation.
//! Background pixels are drawn uniformly from the least active fraction of
//! the whole image. Both sets are redrawn every iteration.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, invalid_param, Result};
use crate::image::{BBox, Grid, Map};
use crate::seed::splitmix64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub fg_top_frac: f64,
    pub bg_top_frac: f64,
    pub fg_count: usize,
    pub bg_count: usize,
    pub rng_seed: u64,
}

impl SamplerConfig {
    /// 30 pixels per set at 224×224, scaled by area (at least one).
    pub fn for_image(width: usize, height: usize) -> Self {
        let count = scaled_count(30, width, height);
        Self {
            fg_top_frac: 0.3,
            bg_top_frac: 0.3,
            fg_count: count,
            bg_count: count,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fg_top_frac", self.fg_top_frac), ("bg_top_frac", self.bg_top_frac)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(invalid_param(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

pub fn scaled_count(at_224: usize, width: usize, height: usize) -> usize {
    ((at_224 * width * height) as f64 / (224.0 * 224.0)).round().max(1.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Background,
    Foreground,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: Grid<Label>,
    /// Row-major pixel indices, in draw order.
    pub fg_pixels: Vec<usize>,
    pub bg_pixels: Vec<usize>,
    /// A request exceeded its pool and was clipped.
    pub clipped: bool,
    /// The box had no activation and foreground was drawn uniformly.
    pub uniform_fallback: bool,
}

impl PseudoLabelMap {
    pub fn width(&self) -> usize {
        self.labels.width()
    }

    pub fn height(&self) -> usize {
        self.labels.height()
    }

    pub fn labeled_count(&self) -> usize {
        self.fg_pixels.len() + self.bg_pixels.len()
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width();
        let flip = |i: &usize| (i / w) * w + (w - 1 - i % w);
        Self {
            labels: self.labels.flip_horizontal(),
            fg_pixels: self.fg_pixels.iter().map(flip).collect(),
            bg_pixels: self.bg_pixels.iter().map(flip).collect(),
            clipped: self.clipped,
            uniform_fallback: self.uniform_fallback,
        }
    }
}

/// Result of a single sampler call.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub pixels: Vec<usize>,
    pub clipped: bool,
    pub uniform_fallback: bool,
}

fn check_map(map: &Map) -> Result<()> {
    if map.is_empty() {
        return Err(invalid_input("empty attention map"));
    }
    if map.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid_input("attention map must be finite and non-negative"));
    }
    Ok(())
}

fn pool_size(frac: f64, n: usize) -> usize {
    ((frac * n as f64).ceil() as usize).clamp(1, n)
}

fn clip(count: usize, pool: usize, what: &str) -> (usize, bool) {
    if count > pool {
        log::warn!("{what} count {count} exceeds pool of {pool}; clipping");
        (pool, true)
    } else {
        (count, false)
    }
}

/// Top `fg_top_frac` of the in-box pixels by activation (ties by row-major
/// index), sampled without replacement proportionally to activation.
pub fn sample_foreground(map: &Map, bbox: BBox, cfg: &SamplerConfig) -> Result<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    sample_foreground_with(map, bbox, cfg, &mut rng)
}

fn sample_foreground_with(map: &Map, bbox: BBox, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<Draw> {
    cfg.validate()?;
    check_map(map)?;
    if bbox.area() == 0 || !bbox.fits_in(map.width(), map.height()) {
        return Err(invalid_input(format!("box {bbox:?} does not fit the map")));
    }
    let w = map.width();
    let mut in_box: Vec<usize> = (bbox.y_min..bbox.y_max)
        .flat_map(|y| (bbox.x_min..bbox.x_max).map(move |x| y * w + x))
        .collect();
    let values = map.data();
    if in_box.iter().all(|&i| values[i] == 0.0) {
        log::info!("box {bbox:?} has no activation; sampling foreground uniformly");
        let (count, clipped) = clip(cfg.fg_count, in_box.len(), "foreground");
        let pixels = index::sample(rng, in_box.len(), count)
            .into_iter()
            .map(|j| in_box[j])
            .collect();
        return Ok(Draw {
            pixels,
            clipped,
            uniform_fallback: true,
        });
    }
    in_box.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    in_box.truncate(pool_size(cfg.fg_top_frac, in_box.len()));
    let (count, clipped) = clip(cfg.fg_count, in_box.len(), "foreground");
    let weights: Vec<f64> = in_box.iter().map(|&i| values[i]).collect();
    let mut taken = vec![false; weights.len()];
    let mut remaining: f64 = weights.iter().sum();
    let mut pixels = Vec::with_capacity(count);
    for _ in 0..count {
        let pick = if remaining > 0.0 {
            let mut u = rng.random::<f64>() * remaining;
            let mut chosen = None;
            for (j, &wt) in weights.iter().enumerate() {
                if taken[j] || wt == 0.0 {
                    continue;
                }
                chosen = Some(j);
                if u < wt {
                    break;
                }
                u -= wt;
            }
            chosen.expect("positive remaining weight")
        } else {
            // only zero-activation pixels are left
            let left: Vec<usize> = (0..weights.len()).filter(|&j| !taken[j]).collect();
            left[rng.random_range(0..left.len())]
        };
        taken[pick] = true;
        pixels.push(in_box[pick]);
        // recompute rather than subtract to avoid drift
        remaining = weights.iter().zip(&taken).filter(|(_, &t)| !t).map(|(w, _)| w).sum();
    }
    Ok(Draw {
        pixels,
        clipped,
        uniform_fallback: false,
    })
}

/// Lowest `bg_top_frac` of all pixels by activation (ties by row-major
/// index), sampled uniformly without replacement.
pub fn sample_background(map: &Map, cfg: &SamplerConfig) -> Result<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.rng_seed ^ BG_STREAM));
    sample_background_with(map, cfg, &mut rng)
}

const BG_STREAM: u64 = 0x6267_5f73_616d_706c;
const REDRAW_STREAM: u64 = 0x7265_6472_6177_0001;

fn background_pool(map: &Map, frac: f64) -> Vec<usize> {
    let values = map.data();
    let mut all: Vec<usize> = (0..values.len()).collect();
    all.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    all.truncate(pool_size(frac, values.len()));
    all
}

fn sample_background_with(map: &Map, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<Draw> {
    cfg.validate()?;
    check_map(map)?;
    let pool = background_pool(map, cfg.bg_top_frac);
    let (count, clipped) = clip(cfg.bg_count, pool.len(), "background");
    let pixels = index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|j| pool[j])
        .collect();
    Ok(Draw {
        pixels,
        clipped,
        uniform_fallback: false,
    })
}

/// Composes both samplers. Background pixels that collide with foreground
/// are dropped and redrawn from the unused part of the background pool.
pub fn build_pseudo_labels(map: &Map, bbox: BBox, cfg: &SamplerConfig) -> Result<PseudoLabelMap> {
    let (w, h) = (map.width(), map.height());
    let mut labels = Grid::filled(w, h, Label::Ignore);
    let fg = if cfg.fg_count == 0 {
        cfg.validate()?;
        check_map(map)?;
        Draw {
            pixels: Vec::new(),
            clipped: false,
            uniform_fallback: false,
        }
    } else {
        sample_foreground(map, bbox, cfg)?
    };
    let mut bg = sample_background(map, cfg)?;
    let mut fg_set = vec![false; w * h];
    for &i in &fg.pixels {
        fg_set[i] = true;
    }
    let before = bg.pixels.len();
    bg.pixels.retain(|&i| !fg_set[i]);
    let missing = before - bg.pixels.len();
    if missing > 0 {
        let mut used = fg_set.clone();
        for &i in &bg.pixels {
            used[i] = true;
        }
        let spare: Vec<usize> = background_pool(map, cfg.bg_top_frac)
            .into_iter()
            .filter(|&i| !used[i])
            .collect();
        let (take, clipped) = clip(missing, spare.len(), "background redraw");
        bg.clipped |= clipped;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(cfg.rng_seed ^ REDRAW_STREAM));
        bg.pixels
            .extend(index::sample(&mut rng, spare.len(), take).into_iter().map(|j| spare[j]));
    }
    for &i in &fg.pixels {
        labels.data_mut()[i] = Label::Foreground;
    }
    for &i in &bg.pixels {
        debug_assert!(!fg_set[i]);
        labels.data_mut()[i] = Label::Background;
    }
    Ok(PseudoLabelMap {
        labels,
        fg_pixels: fg.pixels,
        bg_pixels: bg.pixels,
        clipped: fg.clipped || bg.clipped,
        uniform_fallback: fg.uniform_fallback,
    })
}
