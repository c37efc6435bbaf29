//! Inference: the localization network and the frozen classifier only.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Classifier;
use crate::config::RunConfig;
use crate::data::Manifest;
use crate::error::{DipsError, Result};
use crate::image::{Map, RgbImage};
use crate::io;
use crate::model::{Checkpoint, UNet};

pub const SCORES_FILE: &str = "scores.csv";
pub const PREDICTION_INFO: &str = "prediction.json";

/// Produces foreground maps and class probabilities for raw images.
///
/// Holds no attention provider: maps come from the network alone and the
/// scores from the classifier on the unmodified image.
pub struct Inferencer {
    model: UNet,
    classifier: Box<dyn Classifier>,
}

impl Inferencer {
    pub fn new(model: UNet, classifier: Box<dyn Classifier>) -> Self {
        Self { model, classifier }
    }

    pub fn from_checkpoint(path: &Path, classifier: Box<dyn Classifier>) -> Result<(Self, Checkpoint)> {
        if !path.exists() {
            return Err(DipsError::Checkpoint(format!("{} does not exist", path.display())));
        }
        let ckpt = Checkpoint::load(path)?;
        Ok((Self::new(ckpt.model.clone(), classifier), ckpt))
    }

    pub fn predict(&self, image: &RgbImage) -> Result<(Map, Vec<f64>)> {
        let map = self.model.forward(image)?;
        let scores = self.classifier.output(image)?.probabilities;
        Ok((map.fg, scores))
    }
}

/// The run configuration a training run stored in its checkpoint.
pub fn checkpoint_run_config(ckpt: &Checkpoint) -> Result<RunConfig> {
    let value = ckpt
        .meta
        .get("run_config")
        .cloned()
        .ok_or_else(|| DipsError::Checkpoint("checkpoint has no run configuration".into()))?;
    serde_json::from_value(value).map_err(|e| DipsError::Checkpoint(format!("run configuration: {e}")))
}

/// Written next to the maps so evaluation can label its report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionInfo {
    pub loss_set: Option<String>,
    pub num_images: usize,
}

/// Writes `<id>.png` per record plus `scores.csv` and `prediction.json`.
pub fn infer_manifest(
    inferencer: &Inferencer,
    manifest: &Manifest,
    out_dir: &Path,
    loss_set: Option<String>,
) -> Result<()> {
    manifest.check_unique_ids()?;
    fs::create_dir_all(out_dir)?;
    let mut scores = String::new();
    for r in &manifest.records {
        let id = r.image_id();
        let image = io::read_rgb(&r.image)?;
        let (map, probs) = inferencer.predict(&image)?;
        io::write_map(&out_dir.join(format!("{id}.png")), &map)?;
        scores.push_str(&id);
        for p in probs {
            scores.push_str(&format!(",{p}"));
        }
        scores.push('\n');
    }
    fs::write(out_dir.join(SCORES_FILE), scores)?;
    let info = PredictionInfo {
        loss_set,
        num_images: manifest.records.len(),
    };
    fs::write(out_dir.join(PREDICTION_INFO), serde_json::to_vec_pretty(&info)?)?;
    Ok(())
}

/// Parses `scores.csv` into `(id, probabilities)` rows.
pub fn read_scores(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut parts = line.split(',');
            let id = parts.next().unwrap_or_default().to_string();
            let scores = parts
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| DipsError::Dataset(format!("bad score in `{line}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((id, scores))
        })
        .collect()
}
