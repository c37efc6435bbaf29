//! Datasets: manifest files and the synthetic shapes generator.
//!
//! A manifest has one record per line:
//!
//! ```text
//! <image path> <class> <x0> <y0> <x1> <y1> [<x0> <y0> <x1> <y1> ...] [<mask path>]
//! ```
//!
//! Boxes are half-open pixel rectangles. Relative paths resolve against the
//! manifest's directory. Lines starting with `#` and blank lines are skipped.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::Palette;
use crate::error::{invalid_param, DipsError, Result};
use crate::image::{BBox, Mask, RgbImage};
use crate::io;
use crate::seed::{rng_for, Stream};

pub const DATASET_INFO_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub image: PathBuf,
    pub class_index: usize,
    pub boxes: Vec<BBox>,
    pub mask: Option<PathBuf>,
}

impl Record {
    /// File stem of the image, used to match predictions to records.
    pub fn image_id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    /// Sidecar mask of distractor shapes written by the generator.
    pub fn clutter_mask_path(&self) -> Option<PathBuf> {
        let mask = self.mask.as_ref()?;
        let stem = mask.file_stem()?.to_string_lossy();
        Some(mask.with_file_name(format!("{stem}_clutter.png")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

fn dataset_err(msg: impl Into<String>) -> DipsError {
    DipsError::Dataset(msg.into())
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: &str| dataset_err(format!("manifest line {}: {m}", lineno + 1));
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if tokens.len() < 6 {
                return Err(err("expected image, class and at least one box"));
            }
            let class_index = tokens[1].parse().map_err(|_| err("class index is not an integer"))?;
            let mut rest = &tokens[2..];
            let mut boxes = Vec::new();
            while rest.len() >= 4 && rest[..4].iter().all(|t| t.parse::<usize>().is_ok()) {
                let v: Vec<usize> = rest[..4].iter().map(|t| t.parse().expect("checked")).collect();
                boxes.push(BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| err(&e.to_string()))?);
                rest = &rest[4..];
            }
            let mask = match rest {
                [] => None,
                [m] => Some(base.join(m)),
                _ => return Err(err("trailing tokens after boxes")),
            };
            if boxes.is_empty() {
                return Err(err("no box"));
            }
            records.push(Record {
                image: base.join(tokens[0]),
                class_index,
                boxes,
                mask,
            });
        }
        Ok(Self { records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| dataset_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    /// Writes paths relative to the manifest's directory when possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format!("{} {}", rel(&r.image), r.class_index));
            for b in &r.boxes {
                out.push_str(&format!(" {} {} {} {}", b.x_min, b.y_min, b.x_max, b.y_max));
            }
            if let Some(m) = &r.mask {
                out.push_str(&format!(" {}", rel(m)));
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.records.iter().map(|r| r.class_index + 1).max().unwrap_or(0)
    }

    /// Fails on duplicate image ids, which would make predictions ambiguous.
    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.image_id()) {
                return Err(dataset_err(format!("duplicate image id {}", r.image_id())));
            }
        }
        Ok(())
    }
}

/// One image with its annotations, loaded into memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub class_index: usize,
    pub boxes: Vec<BBox>,
    pub mask: Option<Mask>,
    pub clutter: Option<Mask>,
}

pub fn load_sample(record: &Record) -> Result<Sample> {
    let image = io::read_rgb(&record.image)?;
    let mask = record.mask.as_deref().map(io::read_mask).transpose()?;
    let clutter = match record.clutter_mask_path() {
        Some(p) if p.exists() => Some(io::read_mask(&p)?),
        _ => None,
    };
    for m in mask.iter().chain(clutter.iter()) {
        if m.width() != image.width() || m.height() != image.height() {
            return Err(dataset_err(format!(
                "mask size differs from image {}",
                record.image.display()
            )));
        }
    }
    for b in &record.boxes {
        if !b.fits_in(image.width(), image.height()) {
            return Err(dataset_err(format!(
                "box {b:?} outside image {}",
                record.image.display()
            )));
        }
    }
    Ok(Sample {
        id: record.image_id(),
        image,
        class_index: record.class_index,
        boxes: record.boxes.clone(),
        mask,
        clutter,
    })
}

pub fn load_all(manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest.records.iter().map(load_sample).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Target radius range as a fraction of the image side.
    pub target_radius: (f64, f64),
    pub max_clutter: usize,
    pub clutter_radius: (f64, f64),
    pub background_level: (f64, f64),
    pub background_amplitude: f64,
    pub noise_sigma: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn new(num_images: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            num_images,
            image_size: 64,
            num_classes,
            shape_kinds: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle],
            target_radius: (0.2, 0.32),
            max_clutter: 2,
            clutter_radius: (0.09, 0.15),
            background_level: (0.4, 0.6),
            background_amplitude: 0.06,
            noise_sigma: 0.02,
            split: [0.7, 0.1, 0.2],
            seed,
        }
    }

    /// Exact split sizes.
    pub fn with_counts(train: usize, val: usize, test: usize, num_classes: usize, seed: u64) -> Self {
        let n = train + val + test;
        let mut spec = Self::new(n, num_classes, seed);
        spec.split = [train as f64 / n as f64, val as f64 / n as f64, test as f64 / n as f64];
        spec
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let val = (self.num_images as f64 * self.split[1]).round() as usize;
        let test = (self.num_images as f64 * self.split[2]).round() as usize;
        [self.num_images.saturating_sub(val + test), val, test]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_images == 0 {
            return Err(invalid_param("dataset needs at least one class and one image"));
        }
        if self.image_size < 16 {
            return Err(invalid_param("image size must be at least 16"));
        }
        if self.shape_kinds.is_empty() {
            return Err(invalid_param("no shape kinds"));
        }
        let ok_range = |(a, b): (f64, f64), hi: f64| a > 0.0 && a <= b && b <= hi;
        if !ok_range(self.target_radius, 0.45) || !ok_range(self.clutter_radius, 0.45) {
            return Err(invalid_param("shape radii must satisfy 0 < min <= max <= 0.45"));
        }
        if !ok_range(self.background_level, 1.0) {
            return Err(invalid_param("background level range must lie in (0, 1]"));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid_param("split fractions must be non-negative and sum to 1"));
        }
        if self.noise_sigma < 0.0 || self.background_amplitude < 0.0 {
            return Err(invalid_param("noise and amplitude must be non-negative"));
        }
        Ok(())
    }
}

/// Stored next to the manifests so later stages know the dataset geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub num_classes: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub synthetic: Option<SyntheticDatasetSpec>,
}

impl DatasetInfo {
    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(DATASET_INFO_FILE);
        let text = fs::read_to_string(&p).map_err(|e| dataset_err(format!("{}: {e}", p.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    /// Triangle vertex radii as fractions of `rx`.
    vertex_scale: [f64; 3],
}

impl Shape {
    fn random(kind: ShapeKind, cx: f64, cy: f64, r: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            kind,
            cx,
            cy,
            rx: r * rng.random_range(0.75..=1.0),
            ry: r * rng.random_range(0.75..=1.0),
            angle: rng.random_range(0.0..PI),
            vertex_scale: [
                rng.random_range(0.85..=1.0),
                rng.random_range(0.85..=1.0),
                rng.random_range(0.85..=1.0),
            ],
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.kind {
            ShapeKind::Ellipse => (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= self.rx * 0.85 && v.abs() <= self.ry * 0.85,
            ShapeKind::Triangle => {
                let pts: Vec<(f64, f64)> = (0..3)
                    .map(|i| {
                        let t = 2.0 * PI * i as f64 / 3.0 - PI / 2.0;
                        let r = self.rx * self.vertex_scale[i];
                        (r * t.cos(), r * t.sin())
                    })
                    .collect();
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0);
                let d = [side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])];
                d.iter().all(|&x| x >= 0.0) || d.iter().all(|&x| x <= 0.0)
            }
        }
    }

    fn rasterize(&self, size: usize) -> Mask {
        Mask::from_fn(size, size, |x, y| self.contains(x as f64 + 0.5, y as f64 + 0.5))
    }
}

/// One generated image with its masks.
#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub image: RgbImage,
    pub class_index: usize,
    pub mask: Mask,
    pub clutter: Mask,
    pub bbox: BBox,
}

/// Renders one image of class `class_index`; fully determined by `rng`.
pub fn render_synthetic(
    spec: &SyntheticDatasetSpec,
    palette: &Palette,
    class_index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticImage> {
    let s = spec.image_size;
    let sf = s as f64;
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("positive sigma");

    // target
    let (mask, target_box) = loop {
        let kind = *spec.shape_kinds.choose(rng).expect("non-empty");
        let r = sf * rng.random_range(spec.target_radius.0..=spec.target_radius.1);
        let margin = r + 1.0;
        let cx = rng.random_range(margin..=(sf - margin).max(margin));
        let cy = rng.random_range(margin..=(sf - margin).max(margin));
        let shape = Shape::random(kind, cx, cy, r, rng);
        let mask = shape.rasterize(s);
        if let Some(b) = mask.tight_box() {
            if mask.count() >= 16 {
                break (mask, b);
            }
        }
    };

    // distractors, kept away from the target box
    let mut clutter = Mask::filled(s, s, false);
    let mut clutter_colors = Vec::new();
    let n_clutter = rng.random_range(0..=spec.max_clutter);
    for _ in 0..n_clutter {
        for _attempt in 0..30 {
            let kind = *spec.shape_kinds.choose(rng).expect("non-empty");
            let r = sf * rng.random_range(spec.clutter_radius.0..=spec.clutter_radius.1);
            let cx = rng.random_range(r..=(sf - r).max(r));
            let cy = rng.random_range(r..=(sf - r).max(r));
            let shape = Shape::random(kind, cx, cy, r, rng);
            let m = shape.rasterize(s);
            let Some(b) = m.tight_box() else { continue };
            let grown = BBox::new(
                target_box.x_min.saturating_sub(2),
                target_box.y_min.saturating_sub(2),
                (target_box.x_max + 2).min(s),
                (target_box.y_max + 2).min(s),
            )?;
            if b.intersection_area(&grown) > 0 {
                continue;
            }
            let color = *palette.clutter_colors().choose(rng).expect("clutter colors");
            clutter_colors.push((m, color));
            break;
        }
    }
    for (m, _) in &clutter_colors {
        for (c, &v) in clutter.data_mut().iter_mut().zip(m.data()) {
            *c |= v;
        }
    }

    // smooth grayish background
    let level = rng.random_range(spec.background_level.0..=spec.background_level.1);
    let tint: [f64; 3] = [
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
    ];
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let f = rng.random_range(0.5..2.0) * 2.0 * PI / sf;
            let theta = rng.random_range(0.0..2.0 * PI);
            (f * theta.cos(), f * theta.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let [col_a, col_b] = palette.class_colors(class_index);
    let phase = (rng.random_range(0..2usize), rng.random_range(0..2usize));
    let mut image = RgbImage::filled(s, s, [0.0; 3]);
    for y in 0..s {
        for x in 0..s {
            let base = if *mask.get(x, y) {
                if ((x + phase.0) / 2 + (y + phase.1) / 2) % 2 == 0 {
                    col_a
                } else {
                    col_b
                }
            } else if let Some((_, c)) = clutter_colors.iter().rev().find(|(m, _)| *m.get(x, y)) {
                *c
            } else {
                let wave: f64 = waves
                    .iter()
                    .map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                    .sum::<f64>()
                    / 3.0;
                let v = level + spec.background_amplitude * wave;
                [v + tint[0], v + tint[1], v + tint[2]]
            };
            let px = [
                (base[0] + noise.sample(rng)).clamp(0.0, 1.0),
                (base[1] + noise.sample(rng)).clamp(0.0, 1.0),
                (base[2] + noise.sample(rng)).clamp(0.0, 1.0),
            ];
            image.set_pixel(x, y, px);
        }
    }
    let clutter = Mask::from_fn(s, s, |x, y| *clutter.get(x, y) && !*mask.get(x, y));
    Ok(SyntheticImage {
        image,
        class_index,
        mask,
        clutter,
        bbox: target_box,
    })
}

/// Paths of the three manifests of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

impl GeneratedDataset {
    pub fn at(dir: &Path) -> Self {
        Self {
            train: dir.join("train.txt"),
            val: dir.join("val.txt"),
            test: dir.join("test.txt"),
        }
    }
}

/// Writes images, masks, manifests and `dataset.json` into `out_dir`.
///
/// Refuses a non-empty directory unless `force` is set, in which case the
/// previously generated files are replaced.
pub fn generate_synthetic_dataset(
    spec: &SyntheticDatasetSpec,
    out_dir: &Path,
    force: bool,
) -> Result<GeneratedDataset> {
    spec.validate()?;
    if out_dir.exists() && fs::read_dir(out_dir)?.next().is_some() {
        if !force {
            return Err(dataset_err(format!(
                "{} is not empty; pass --force to overwrite",
                out_dir.display()
            )));
        }
        for sub in ["images", "masks"] {
            let p = out_dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(p)?;
            }
        }
    }
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let palette = Palette::new(spec.num_classes);
    let paths = GeneratedDataset::at(out_dir);
    let mut index = 0u64;
    for (split, (count, manifest_path)) in ["train", "val", "test"]
        .iter()
        .zip(
            spec.split_counts()
                .into_iter()
                .zip([&paths.train, &paths.val, &paths.test]),
        )
    {
        // balanced classes, shuffled per split
        let mut classes: Vec<usize> = (0..count).map(|i| i % spec.num_classes).collect();
        classes.shuffle(&mut rng_for(spec.seed, Stream::Dataset, u64::MAX - index, 0));
        let mut records = Vec::with_capacity(count);
        for (i, &class_index) in classes.iter().enumerate() {
            let mut rng = rng_for(spec.seed, Stream::Dataset, index, 0);
            index += 1;
            let img = render_synthetic(spec, &palette, class_index, &mut rng)?;
            let stem = format!("{split}_{i:05}");
            let image_path = out_dir.join("images").join(format!("{stem}.png"));
            let mask_path = out_dir.join("masks").join(format!("{stem}.png"));
            io::write_rgb(&image_path, &img.image)?;
            io::write_mask(&mask_path, &img.mask)?;
            io::write_mask(&out_dir.join("masks").join(format!("{stem}_clutter.png")), &img.clutter)?;
            records.push(Record {
                image: image_path,
                class_index,
                boxes: vec![img.bbox],
                mask: Some(mask_path),
            });
        }
        Manifest { records }.write(manifest_path)?;
    }
    let info = DatasetInfo {
        num_classes: spec.num_classes,
        image_width: spec.image_size,
        image_height: spec.image_size,
        synthetic: Some(spec.clone()),
    };
    fs::write(out_dir.join(DATASET_INFO_FILE), serde_json::to_string_pretty(&info)?)?;
    Ok(paths)
}
