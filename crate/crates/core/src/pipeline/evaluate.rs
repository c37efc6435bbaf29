//! Scores a prediction directory against a manifest.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{load_sample, Manifest};
use crate::error::{DipsError, Result};
use crate::io;
use crate::metrics::{EvalRecord, MetricsReport};
use crate::plot::plot_sweep;

use super::infer::{read_scores, PredictionInfo, PREDICTION_INFO, SCORES_FILE};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep_maxboxacc.csv";
pub const SWEEP_PLOT: &str = "sweep_maxboxacc.svg";

/// Pairs every manifest record with its predicted map and scores. Fails
/// with the full list of ids that have no prediction.
pub fn load_records(pred_dir: &Path, manifest: &Manifest) -> Result<Vec<EvalRecord>> {
    manifest.check_unique_ids()?;
    let missing: Vec<String> = manifest
        .records
        .iter()
        .map(|r| r.image_id())
        .filter(|id| !pred_dir.join(format!("{id}.png")).exists())
        .collect();
    if !missing.is_empty() {
        return Err(DipsError::Dataset(format!(
            "no prediction for ids: {}",
            missing.join(", ")
        )));
    }
    let scores_path = pred_dir.join(SCORES_FILE);
    let scores: HashMap<String, Vec<f64>> = if scores_path.exists() {
        read_scores(&scores_path)?.into_iter().collect()
    } else {
        HashMap::new()
    };
    manifest
        .records
        .iter()
        .map(|r| {
            let sample = load_sample(r)?;
            let map = io::read_map(&pred_dir.join(format!("{}.png", sample.id)))?;
            let class_scores = scores.get(&sample.id).cloned().unwrap_or_default();
            EvalRecord::new(
                sample.id,
                sample.boxes,
                sample.mask,
                map,
                class_scores,
                sample.class_index,
            )
        })
        .collect()
}

/// Writes `metrics.csv`, `sweep_maxboxacc.csv` and the sweep plot into
/// `out_dir`. The report is tagged with `tag`, or with the loss set recorded
/// by inference when `tag` is `None`.
pub fn evaluate(pred_dir: &Path, manifest_path: &Path, out_dir: &Path, tag: Option<String>) -> Result<MetricsReport> {
    let manifest = Manifest::read(manifest_path)?;
    let records = load_records(pred_dir, &manifest)?;
    let tag = tag.or_else(|| {
        let text = std::fs::read(pred_dir.join(PREDICTION_INFO)).ok()?;
        serde_json::from_slice::<PredictionInfo>(&text).ok()?.loss_set
    });
    let report = MetricsReport::compute(&records, tag)?;
    std::fs::create_dir_all(out_dir)?;
    report.write_csv(&out_dir.join(METRICS_FILE))?;
    report.sweep.write_csv(&out_dir.join(SWEEP_FILE))?;
    plot_sweep(
        &report.sweep,
        &out_dir.join(SWEEP_PLOT),
        "MaxBoxAcc over map thresholds",
    )?;
    Ok(report)
}
