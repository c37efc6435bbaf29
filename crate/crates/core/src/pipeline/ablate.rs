//! Loss-term ablations: train, infer and evaluate one run per loss set and
//! seed, then collect the reports in one table.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::evaluate::evaluate;
use super::infer::{infer_manifest, Inferencer};
use super::train::train;
use super::{build_classifier, dataset_info};
use crate::config::RunConfig;
use crate::data::Manifest;
use crate::error::Result;
use crate::metrics::MetricsReport;

pub const ABLATION_FILE: &str = "ablation.csv";

/// The three loss sets compared by default.
pub const DEFAULT_LOSS_SETS: [&str; 3] = ["cpa+crf", "cls+cpa", "cls+cpa+crf"];

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub loss_set: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub report: MetricsReport,
}

/// Sets every seed of the run from one number.
pub fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    cfg.harvest.seed = seed;
    cfg.sampler.seed = seed;
    cfg.model.init_seed = seed;
    cfg
}

/// Trains on the training split, predicts the test split and evaluates it.
pub fn run_once(cfg: &RunConfig, dir: &Path) -> Result<MetricsReport> {
    let outcome = train(cfg, dir, None)?;
    let info = dataset_info(cfg)?;
    let classifier = build_classifier(&cfg.classifier, &info)?;
    let ckpt = outcome.best.unwrap_or(outcome.last);
    let (inferencer, _) = Inferencer::from_checkpoint(&ckpt, classifier)?;
    let test_manifest = cfg.data.split_path(&cfg.data.test);
    let manifest = Manifest::read(&test_manifest)?;
    let pred_dir = dir.join("predictions");
    let tag = cfg.loss.loss_set_tag();
    infer_manifest(&inferencer, &manifest, &pred_dir, Some(tag.clone()))?;
    evaluate(&pred_dir, &test_manifest, &dir.join("eval"), Some(tag))
}

pub fn ablate(cfg: &RunConfig, loss_sets: &[String], seeds: &[u64], out_dir: &Path) -> Result<Vec<AblationRun>> {
    fs::create_dir_all(out_dir)?;
    let mut runs = Vec::new();
    for set in loss_sets {
        for &seed in seeds {
            let mut run_cfg = with_seed(cfg, seed);
            run_cfg.loss.apply_loss_set(set)?;
            let tag = run_cfg.loss.loss_set_tag();
            let dir = out_dir.join(format!("{tag}_seed{seed}"));
            info!("ablation run {tag} seed {seed}");
            let report = run_once(&run_cfg, &dir)?;
            runs.push(AblationRun {
                loss_set: tag,
                seed,
                dir,
                report,
            });
        }
    }
    fs::write(out_dir.join(ABLATION_FILE), ablation_csv(&runs))?;
    Ok(runs)
}

pub fn ablation_csv(runs: &[AblationRun]) -> String {
    let mut out = String::from("loss_set,seed,pxap,new_max_box_acc,max_box_acc_0.5,flatness_0.7\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.loss_set,
            r.seed,
            r.report.pxap.map_or(String::new(), |v| v.to_string()),
            r.report.new_max_box_acc,
            r.report.max_box_acc[1],
            r.report.flatness
        ));
    }
    out
}

/// Mean PxAP per loss set, in first-seen order.
pub fn mean_pxap_by_set(runs: &[AblationRun]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in runs {
        let p = r.report.pxap.unwrap_or(0.0);
        match out.iter_mut().find(|(s, _, _)| *s == r.loss_set) {
            Some(e) => {
                e.1 += p;
                e.2 += 1;
            }
            None => out.push((r.loss_set.clone(), p, 1)),
        }
    }
    out.into_iter().map(|(s, t, n)| (s, t / n as f64)).collect()
}
