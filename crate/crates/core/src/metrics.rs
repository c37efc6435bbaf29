//! Localization metrics: box accuracy over map thresholds, pixel average
//! precision, top-k localization accuracy and error dissection.
//!
//! Boxes use half-open pixel coordinates: `(x0, y0, x1, y1)` covers columns
//! `x0..x1` and rows `y0..y1`. A map pixel is foreground at threshold `τ`
//! when its value is strictly greater than `τ`.

use std::fs;
use std::path::Path;

use crate::error::{invalid_input, Result};
use crate::harvest::component_boxes;
use crate::image::{BBox, Map, Mask};

/// IoU thresholds averaged by [`new_max_box_acc`].
pub const IOU_DELTAS: [f64; 3] = [0.3, 0.5, 0.7];

pub const DEFAULT_GRID_SIZE: usize = 100;

/// Map threshold at which the flatness of a sweep is measured.
pub const FLATNESS_TAU: f64 = 0.7;

fn check_area(b: &BBox) -> Result<f64> {
    match b.area() {
        0 => Err(invalid_input(format!("box {b:?} has zero area"))),
        a => Ok(a as f64),
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    let (aa, ab) = (check_area(a)?, check_area(b)?);
    let inter = a.intersection_area(b) as f64;
    Ok(inter / (aa + ab - inter))
}

/// Intersection over the predicted box.
pub fn iop(pred: &BBox, gt: &BBox) -> Result<f64> {
    check_area(gt)?;
    Ok(pred.intersection_area(gt) as f64 / check_area(pred)?)
}

/// Intersection over the annotated box.
pub fn ioa(pred: &BBox, gt: &BBox) -> Result<f64> {
    check_area(pred)?;
    Ok(pred.intersection_area(gt) as f64 / check_area(gt)?)
}

/// Intersection over the ground-truth box; same quantity as [`ioa`].
pub fn iog(pred: &BBox, gt: &BBox) -> Result<f64> {
    ioa(pred, gt)
}

/// One evaluated image.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub image_id: String,
    pub gt_boxes: Vec<BBox>,
    pub gt_mask: Option<Mask>,
    pub pred_map: Map,
    pub class_scores: Vec<f64>,
    pub true_class: usize,
}

impl EvalRecord {
    /// Validates the record. Without boxes, the mask's tight box is used.
    pub fn new(
        image_id: impl Into<String>,
        gt_boxes: Vec<BBox>,
        gt_mask: Option<Mask>,
        pred_map: Map,
        class_scores: Vec<f64>,
        true_class: usize,
    ) -> Result<Self> {
        let image_id = image_id.into();
        let (w, h) = (pred_map.width(), pred_map.height());
        if pred_map.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid_input(format!("{image_id}: prediction outside [0, 1]")));
        }
        if let Some(m) = &gt_mask {
            if !pred_map.same_shape(m) {
                return Err(invalid_input(format!("{image_id}: mask and prediction sizes differ")));
            }
        }
        let gt_boxes = if gt_boxes.is_empty() {
            let b = gt_mask
                .as_ref()
                .and_then(|m| m.tight_box())
                .ok_or_else(|| invalid_input(format!("{image_id}: no ground-truth box or mask")))?;
            vec![b]
        } else {
            gt_boxes
        };
        for b in &gt_boxes {
            check_area(b)?;
            if !b.fits_in(w, h) {
                return Err(invalid_input(format!("{image_id}: box {b:?} outside the map")));
            }
        }
        if !class_scores.is_empty() && (true_class >= class_scores.len() || class_scores.iter().any(|s| !s.is_finite()))
        {
            return Err(invalid_input(format!("{image_id}: bad class scores")));
        }
        Ok(Self {
            image_id,
            gt_boxes,
            gt_mask,
            pred_map,
            class_scores,
            true_class,
        })
    }

    /// Whether the true class is among the `k` best scores; ties go to the
    /// lower class index.
    pub fn in_top_k(&self, k: usize) -> Result<bool> {
        if self.class_scores.is_empty() {
            return Err(invalid_input(format!("{}: no class scores", self.image_id)));
        }
        let t = self.class_scores[self.true_class];
        let rank = self
            .class_scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > t || (s == t && j < self.true_class))
            .count();
        Ok(rank < k)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BoxExtraction {
    /// Tight box of the largest connected component.
    #[default]
    LargestComponent,
    /// One box per connected component.
    AllComponents,
}

/// `i / n` for `i in 0..n`.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / n as f64).collect()
}

/// Boxes of the superlevel set `{ v > τ }`, largest component first.
pub fn map_to_boxes(map: &Map, tau: f64, extraction: BoxExtraction) -> Result<Vec<BBox>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(invalid_input(format!("threshold {tau} outside [0, 1]")));
    }
    let binary = map.map(|&v| v > tau);
    let mut boxes: Vec<BBox> = component_boxes(&binary).into_iter().map(|(b, _)| b).collect();
    if extraction == BoxExtraction::LargestComponent {
        boxes.truncate(1);
    }
    Ok(boxes)
}

/// Thresholds and box extraction used by the box metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxProtocol {
    pub thresholds: Vec<f64>,
    pub extraction: BoxExtraction,
}

impl Default for BoxProtocol {
    fn default() -> Self {
        Self {
            thresholds: threshold_grid(DEFAULT_GRID_SIZE),
            extraction: BoxExtraction::LargestComponent,
        }
    }
}

impl BoxProtocol {
    /// The default grid merged with every distinct map value, which makes
    /// the sweep exact: every distinct superlevel set is visited.
    pub fn exact(records: &[EvalRecord]) -> Self {
        let mut t = threshold_grid(DEFAULT_GRID_SIZE);
        t.extend(records.iter().flat_map(|r| r.pred_map.data().iter().copied()));
        t.sort_by(f64::total_cmp);
        t.dedup();
        Self {
            thresholds: t,
            extraction: BoxExtraction::LargestComponent,
        }
    }

    fn validate(&self) -> Result<()> {
        let ascending = self.thresholds.windows(2).all(|w| w[0] < w[1]);
        if self.thresholds.is_empty() || !ascending || self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(invalid_input("thresholds must be strictly increasing values in [0, 1]"));
        }
        Ok(())
    }
}

/// Best IoU per record and threshold, shared by all box metrics.
#[derive(Clone, Debug)]
pub struct BoxEvaluation {
    pub thresholds: Vec<f64>,
    /// `best_iou[r][t]`: best IoU of record `r` at threshold `t`, 0 without boxes.
    pub best_iou: Vec<Vec<f64>>,
}

impl BoxEvaluation {
    pub fn new(records: &[EvalRecord], protocol: &BoxProtocol) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid_input("no records to evaluate"));
        }
        protocol.validate()?;
        let mut best_iou = Vec::with_capacity(records.len());
        for r in records {
            let mut row = Vec::with_capacity(protocol.thresholds.len());
            for &tau in &protocol.thresholds {
                let mut best: f64 = 0.0;
                for p in map_to_boxes(&r.pred_map, tau, protocol.extraction)? {
                    for g in &r.gt_boxes {
                        best = best.max(iou(&p, g)?);
                    }
                }
                row.push(best);
            }
            best_iou.push(row);
        }
        Ok(Self {
            thresholds: protocol.thresholds.clone(),
            best_iou,
        })
    }

    /// Fraction of records with IoU ≥ `delta` at each threshold.
    pub fn accuracy_curve(&self, delta: f64) -> Vec<f64> {
        let n = self.best_iou.len() as f64;
        (0..self.thresholds.len())
            .map(|t| self.best_iou.iter().filter(|row| row[t] >= delta).count() as f64 / n)
            .collect()
    }

    /// Peak accuracy and the first threshold index reaching it.
    pub fn max_accuracy(&self, delta: f64) -> (f64, usize) {
        let curve = self.accuracy_curve(delta);
        let mut best = (curve[0], 0);
        for (i, &v) in curve.iter().enumerate() {
            if v > best.0 {
                best = (v, i);
            }
        }
        best
    }
}

pub fn max_box_acc(records: &[EvalRecord], delta: f64) -> Result<f64> {
    Ok(BoxEvaluation::new(records, &BoxProtocol::default())?
        .max_accuracy(delta)
        .0)
}

pub fn new_max_box_acc(records: &[EvalRecord]) -> Result<f64> {
    let eval = BoxEvaluation::new(records, &BoxProtocol::default())?;
    Ok(IOU_DELTAS.iter().map(|&d| eval.max_accuracy(d).0).sum::<f64>() / IOU_DELTAS.len() as f64)
}

/// Area under the pooled pixel precision-recall curve.
///
/// Every distinct prediction value is a threshold (`v ≥ t` is positive) and
/// the curve is integrated step-wise: `Σ (R_i − R_{i−1}) · P_i`.
pub fn pxap(records: &[EvalRecord]) -> Result<f64> {
    let mut pixels: Vec<(f64, bool)> = Vec::new();
    for r in records {
        let mask = r
            .gt_mask
            .as_ref()
            .ok_or_else(|| invalid_input(format!("{}: pixel precision needs a mask", r.image_id)))?;
        pixels.extend(r.pred_map.data().iter().copied().zip(mask.data().iter().copied()));
    }
    let positives = pixels.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Err(invalid_input("no foreground pixels in the ground truth"));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < pixels.len() {
        let v = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == v {
            if pixels[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Correct class within the top `k` and IoU ≥ 0.5 at the threshold that
/// maximizes box accuracy at 0.5.
pub fn topk_loc_acc(records: &[EvalRecord], k: usize) -> Result<f64> {
    topk_with(&BoxEvaluation::new(records, &BoxProtocol::default())?, records, k)
}

fn topk_with(eval: &BoxEvaluation, records: &[EvalRecord], k: usize) -> Result<f64> {
    let (_, t) = eval.max_accuracy(0.5);
    let mut hits = 0;
    for (r, row) in records.iter().zip(&eval.best_iou) {
        if r.in_top_k(k)? && row[t] >= 0.5 {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Error rates over all records; each wrong localization gets at most one
/// category, checked in the order multi-instance, part, more.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorRates {
    /// IoU below 0.5 (including maps with no box at all).
    pub wrong: f64,
    /// Box covers only part of the object: IoP > 0.5.
    pub lpe: f64,
    /// Box spills well past the object: IoA > 0.7.
    pub lme: f64,
    /// Box spans two or more objects, each with IoG > 0.3.
    pub mie: f64,
}

pub fn error_dissection(records: &[EvalRecord]) -> Result<ErrorRates> {
    dissect_with(&BoxEvaluation::new(records, &BoxProtocol::default())?, records)
}

fn dissect_with(eval: &BoxEvaluation, records: &[EvalRecord]) -> Result<ErrorRates> {
    let (_, t) = eval.max_accuracy(0.5);
    let tau = eval.thresholds[t];
    let mut counts = [0usize; 4];
    for r in records {
        let Some(pred) = map_to_boxes(&r.pred_map, tau, BoxExtraction::LargestComponent)?.pop() else {
            counts[0] += 1;
            continue;
        };
        let mut best = 0.0f64;
        let (mut max_iop, mut max_ioa, mut overlapped) = (0.0f64, 0.0f64, 0);
        for g in &r.gt_boxes {
            best = best.max(iou(&pred, g)?);
            max_iop = max_iop.max(iop(&pred, g)?);
            let a = ioa(&pred, g)?;
            max_ioa = max_ioa.max(a);
            if a > 0.3 {
                overlapped += 1;
            }
        }
        if best >= 0.5 {
            continue;
        }
        counts[0] += 1;
        if overlapped >= 2 {
            counts[3] += 1;
        } else if max_iop > 0.5 {
            counts[1] += 1;
        } else if max_ioa > 0.7 {
            counts[2] += 1;
        }
    }
    let n = records.len() as f64;
    Ok(ErrorRates {
        wrong: counts[0] as f64 / n,
        lpe: counts[1] as f64 / n,
        lme: counts[2] as f64 / n,
        mie: counts[3] as f64 / n,
    })
}

/// One metric evaluated across map thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSeries {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    pub thresholds: Vec<f64>,
    pub series: Vec<SweepSeries>,
}

/// Box accuracy at each IoU threshold in `deltas`, swept over the grid.
pub fn threshold_sweep(records: &[EvalRecord], deltas: &[f64]) -> Result<ThresholdSweep> {
    Ok(sweep_with(
        &BoxEvaluation::new(records, &BoxProtocol::default())?,
        deltas,
    ))
}

fn sweep_with(eval: &BoxEvaluation, deltas: &[f64]) -> ThresholdSweep {
    ThresholdSweep {
        thresholds: eval.thresholds.clone(),
        series: deltas
            .iter()
            .map(|&d| SweepSeries {
                name: format!("iou_{d:.1}"),
                values: eval.accuracy_curve(d),
            })
            .collect(),
    }
}

impl ThresholdSweep {
    pub fn get(&self, name: &str) -> Option<&SweepSeries> {
        self.series.iter().find(|s| s.name == name)
    }

    /// Value at the threshold closest to `tau`, divided by the peak value.
    /// Zero when the series never rises above zero.
    pub fn flatness(&self, name: &str, tau: f64) -> Option<f64> {
        let s = self.get(name)?;
        let at = self
            .thresholds
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - tau).abs().total_cmp(&(b.1 - tau).abs()))?
            .0;
        let peak = s.values.iter().copied().fold(0.0, f64::max);
        Some(if peak > 0.0 { s.values[at] / peak } else { 0.0 })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold");
        for s in &self.series {
            out.push(',');
            out.push_str(&s.name);
        }
        out.push('\n');
        for (i, t) in self.thresholds.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for s in &self.series {
                out.push_str(&format!(",{}", s.values[i]));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| invalid_input("empty sweep file"))?
            .split(',')
            .collect();
        if header.first() != Some(&"threshold") || header.len() < 2 {
            return Err(invalid_input("sweep header must start with `threshold`"));
        }
        let mut sweep = ThresholdSweep {
            thresholds: Vec::new(),
            series: header[1..]
                .iter()
                .map(|n| SweepSeries {
                    name: n.to_string(),
                    values: Vec::new(),
                })
                .collect(),
        };
        for line in lines {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| invalid_input(format!("bad sweep value in `{line}`")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != header.len() {
                return Err(invalid_input(format!("sweep row `{line}` has the wrong width")));
            }
            sweep.thresholds.push(vals[0]);
            for (s, v) in sweep.series.iter_mut().zip(&vals[1..]) {
                s.values.push(*v);
            }
        }
        Ok(sweep)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::parse_csv(&fs::read_to_string(path)?)
    }
}

/// Every metric for one set of records.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub tag: Option<String>,
    pub num_records: usize,
    /// Absent when some record has no mask.
    pub pxap: Option<f64>,
    /// MaxBoxAcc at each of [`IOU_DELTAS`].
    pub max_box_acc: [f64; 3],
    pub new_max_box_acc: f64,
    pub best_threshold: f64,
    /// Absent when some record has no class scores.
    pub top1_loc: Option<f64>,
    pub top5_loc: Option<f64>,
    pub errors: ErrorRates,
    pub flatness: f64,
    pub sweep: ThresholdSweep,
}

impl MetricsReport {
    pub fn compute(records: &[EvalRecord], tag: Option<String>) -> Result<Self> {
        let eval = BoxEvaluation::new(records, &BoxProtocol::default())?;
        let max_box_acc = IOU_DELTAS.map(|d| eval.max_accuracy(d).0);
        let has_masks = records.iter().all(|r| r.gt_mask.is_some());
        let has_scores = records.iter().all(|r| !r.class_scores.is_empty());
        let sweep = sweep_with(&eval, &IOU_DELTAS);
        Ok(Self {
            tag,
            num_records: records.len(),
            pxap: if has_masks { Some(pxap(records)?) } else { None },
            max_box_acc,
            new_max_box_acc: max_box_acc.iter().sum::<f64>() / 3.0,
            best_threshold: eval.thresholds[eval.max_accuracy(0.5).1],
            top1_loc: if has_scores {
                Some(topk_with(&eval, records, 1)?)
            } else {
                None
            },
            top5_loc: if has_scores {
                Some(topk_with(&eval, records, 5)?)
            } else {
                None
            },
            errors: dissect_with(&eval, records)?,
            flatness: sweep.flatness("iou_0.5", FLATNESS_TAU).unwrap_or(0.0),
            sweep,
        })
    }

    /// `metric,value` rows; absent metrics are left out.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        if let Some(t) = &self.tag {
            rows.push(("loss_set".into(), t.clone()));
        }
        rows.push(("num_records".into(), self.num_records.to_string()));
        let mut num = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                rows.push((k.to_string(), format!("{v}")));
            }
        };
        num("pxap", self.pxap);
        num("max_box_acc_0.3", Some(self.max_box_acc[0]));
        num("max_box_acc_0.5", Some(self.max_box_acc[1]));
        num("max_box_acc_0.7", Some(self.max_box_acc[2]));
        num("new_max_box_acc", Some(self.new_max_box_acc));
        num("best_threshold", Some(self.best_threshold));
        num("top1_loc", self.top1_loc);
        num("top5_loc", self.top5_loc);
        num("wrong_rate", Some(self.errors.wrong));
        num("lpe_rate", Some(self.errors.lpe));
        num("lme_rate", Some(self.errors.lme));
        num("mie_rate", Some(self.errors.mie));
        num("flatness_0.7", Some(self.flatness));
        let mut out = String::from("metric,value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Reads a `metric,value` file into pairs.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn rect_mask(w: usize, h: usize, b: BBox) -> Mask {
        Mask::from_fn(w, h, |x, y| b.contains(x, y))
    }

    fn record(pred: Map, gt: BBox, scores: Vec<f64>, class: usize) -> EvalRecord {
        let mask = rect_mask(pred.width(), pred.height(), gt);
        EvalRecord::new("r", vec![gt], Some(mask), pred, scores, class).unwrap()
    }

    fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
        let (mut i, mut u) = (0, 0);
        for y in 0..20 {
            for x in 0..20 {
                let (pa, pb) = (a.contains(x, y), b.contains(x, y));
                i += (pa && pb) as usize;
                u += (pa || pb) as usize;
            }
        }
        i as f64 / u as f64
    }

    #[test]
    fn overlap_ratios() {
        let a = bx(0, 0, 10, 10);
        for f in [iou, iop, ioa, iog] {
            assert_eq!(f(&a, &a).unwrap(), 1.0);
            assert_eq!(f(&a, &bx(12, 12, 15, 15)).unwrap(), 0.0);
        }
        let b = bx(5, 5, 15, 15);
        assert!((iou(&a, &b).unwrap() - 25.0 / 175.0).abs() < 1e-15);
        assert_eq!(iou(&a, &b).unwrap(), pixel_iou(&a, &b));
        let zero = BBox::full(0, 3);
        assert!(iou(&a, &zero).is_err() && iop(&zero, &a).is_err() && ioa(&a, &zero).is_err());
    }

    proptest! {
        #[test]
        fn iou_matches_pixel_count(x0 in 0usize..10, y0 in 0usize..10, w0 in 1usize..10, h0 in 1usize..10,
                                   x1 in 0usize..10, y1 in 0usize..10, w1 in 1usize..10, h1 in 1usize..10) {
            let a = bx(x0, y0, x0 + w0, y0 + h0);
            let b = bx(x1, y1, x1 + w1, y1 + h1);
            prop_assert_eq!(iou(&a, &b).unwrap(), pixel_iou(&a, &b));
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        }
    }

    #[test]
    fn boxes_from_maps() {
        let gt = bx(2, 3, 7, 6);
        let m = rect_mask(10, 10, gt).to_map();
        assert_eq!(
            map_to_boxes(&m, 0.5, BoxExtraction::LargestComponent).unwrap(),
            vec![gt]
        );
        let flat = Map::filled(10, 10, 0.3);
        assert!(map_to_boxes(&flat, 0.5, BoxExtraction::LargestComponent)
            .unwrap()
            .is_empty());
        // blobs of 50 and 20 pixels
        let big = bx(0, 0, 10, 5);
        let small = bx(12, 10, 16, 15);
        let m = Map::from_fn(20, 20, |x, y| {
            if big.contains(x, y) {
                0.8
            } else if small.contains(x, y) {
                0.9
            } else {
                0.0
            }
        });
        assert_eq!(
            map_to_boxes(&m, 0.5, BoxExtraction::LargestComponent).unwrap(),
            vec![big]
        );
        assert_eq!(
            map_to_boxes(&m, 0.5, BoxExtraction::AllComponents).unwrap(),
            vec![big, small]
        );
        assert_eq!(
            map_to_boxes(&m, 0.85, BoxExtraction::LargestComponent).unwrap(),
            vec![small]
        );
        assert!(map_to_boxes(&m, 1.2, BoxExtraction::LargestComponent).is_err());
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gts = [bx(1, 1, 5, 6), bx(0, 2, 8, 8), bx(3, 0, 6, 4)];
        let perfect: Vec<_> = gts
            .iter()
            .map(|&g| record(rect_mask(8, 8, g).to_map(), g, vec![1.0, 0.0], 0))
            .collect();
        assert_eq!(new_max_box_acc(&perfect).unwrap(), 1.0);
        assert_eq!(pxap(&perfect).unwrap(), 1.0);
        assert_eq!(topk_loc_acc(&perfect, 1).unwrap(), 1.0);
        assert_eq!(error_dissection(&perfect).unwrap(), ErrorRates::default());
        let zero: Vec<_> = gts
            .iter()
            .map(|&g| record(Map::filled(8, 8, 0.0), g, vec![1.0, 0.0], 0))
            .collect();
        assert_eq!(new_max_box_acc(&zero).unwrap(), 0.0);
        assert!(max_box_acc(&[], 0.5).is_err());
    }

    #[test]
    fn new_max_box_acc_hand_pattern() {
        // gt 4x4 at the origin; prediction boxes with IoU 1, 0.5625 and 0.4 give
        // per-delta hit counts 3, 2 and 1.
        let gt = bx(0, 0, 4, 4);
        let preds = [bx(0, 0, 4, 4), bx(0, 0, 3, 3), bx(0, 0, 4, 10)];
        let recs: Vec<_> = preds
            .iter()
            .map(|&p| record(rect_mask(10, 10, p).to_map(), gt, vec![], 0))
            .collect();
        assert!((iou(&preds[1], &gt).unwrap() - 0.5625).abs() < 1e-15);
        assert!((iou(&preds[2], &gt).unwrap() - 0.4).abs() < 1e-15);
        let acc: Vec<f64> = IOU_DELTAS.iter().map(|&d| max_box_acc(&recs, d).unwrap()).collect();
        assert_eq!(acc, vec![1.0, 2.0 / 3.0, 1.0 / 3.0]);
        assert!((new_max_box_acc(&recs).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pxap_of_inverted_mask_is_the_base_rate() {
        let gt = bx(1, 1, 3, 4);
        let mask = rect_mask(4, 4, gt);
        let inverted = mask.map(|&b| if b { 0.0 } else { 1.0 });
        let r = EvalRecord::new("a", vec![], Some(mask.clone()), inverted, vec![], 0).unwrap();
        assert_eq!(pxap(&[r]).unwrap(), mask.count() as f64 / 16.0);
    }

    #[test]
    fn pxap_needs_masks() {
        let r = EvalRecord::new("a", vec![bx(0, 0, 2, 2)], None, Map::filled(4, 4, 0.5), vec![], 0).unwrap();
        assert!(pxap(&[r]).is_err());
    }

    #[test]
    fn topk_decouples_class_and_box() {
        let gt = bx(0, 0, 4, 4);
        let map = rect_mask(8, 8, gt).to_map();
        // true class 0 ranks third
        let r = record(map.clone(), gt, vec![0.3, 0.5, 0.4, 0.1, 0.05, 0.01], 0);
        let recs = vec![r.clone(), r];
        assert_eq!(topk_loc_acc(&recs, 1).unwrap(), 0.0);
        assert_eq!(topk_loc_acc(&recs, 5).unwrap(), 1.0);
        // mixed: right class + right box, right class + wrong box,
        // wrong class + right box, top-5 only + right box
        let wrong_box = rect_mask(8, 8, bx(5, 5, 8, 8)).to_map();
        let mixed = vec![
            record(map.clone(), gt, vec![0.9, 0.1], 0),
            record(wrong_box, gt, vec![0.9, 0.1], 0),
            record(map.clone(), gt, vec![0.1, 0.9], 0),
            record(map, gt, vec![0.1, 0.2, 0.3], 0),
        ];
        assert_eq!(topk_loc_acc(&mixed, 1).unwrap(), 0.25);
        assert_eq!(topk_loc_acc(&mixed, 5).unwrap(), 0.75);
    }

    #[test]
    fn dissection_categories() {
        let gt = bx(0, 0, 10, 10);
        // 40% of the gt, inside it: IoU 0.4, IoP 1, IoA 0.4
        let part = record(rect_mask(30, 30, bx(0, 0, 4, 10)).to_map(), gt, vec![], 0);
        let e = error_dissection(&[part]).unwrap();
        assert_eq!((e.wrong, e.lpe, e.lme, e.mie), (1.0, 1.0, 0.0, 0.0));
        // three times the gt area, containing it: IoU 1/3, IoP 1/3, IoA 1
        let more = record(rect_mask(30, 30, bx(0, 0, 30, 10)).to_map(), gt, vec![], 0);
        let e = error_dissection(&[more]).unwrap();
        assert_eq!((e.wrong, e.lpe, e.lme, e.mie), (1.0, 0.0, 1.0, 0.0));
        // one box over two objects
        let twins = vec![bx(0, 0, 6, 6), bx(8, 0, 14, 6)];
        let m = rect_mask(20, 20, bx(0, 0, 14, 6)).to_map();
        let multi = EvalRecord::new("m", twins, None, m, vec![], 0).unwrap();
        let e = error_dissection(&[multi]).unwrap();
        assert_eq!((e.wrong, e.lpe, e.lme, e.mie), (1.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn sweeps_and_flatness() {
        let gt = bx(4, 4, 12, 12);
        let binary: Vec<_> = (0..3)
            .map(|_| record(rect_mask(16, 16, gt).to_map(), gt, vec![], 0))
            .collect();
        let s = threshold_sweep(&binary, &[0.5]).unwrap();
        assert!(s.series[0].values.iter().all(|&v| v == 1.0));
        assert_eq!(s.flatness("iou_0.5", 0.7), Some(1.0));
        assert_eq!(ThresholdSweep::parse_csv(&s.to_csv()).unwrap(), s);

        // a radial blob shrinks as the threshold rises
        let blob = Map::from_fn(16, 16, |x, y| {
            let d2 = (x as f64 - 7.5).powi(2) + (y as f64 - 7.5).powi(2);
            (-d2 / 10.0).exp()
        });
        let mut prev = usize::MAX;
        for tau in threshold_grid(100) {
            let area = map_to_boxes(&blob, tau, BoxExtraction::LargestComponent)
                .unwrap()
                .first()
                .map_or(0, |b| b.area());
            assert!(area <= prev);
            prev = area;
        }
        let blobby = vec![record(blob, gt, vec![], 0)];
        let f = threshold_sweep(&blobby, &[0.5])
            .unwrap()
            .flatness("iou_0.5", 0.7)
            .unwrap();
        assert!(f < 0.4, "{f}");
    }

    #[test]
    fn report_csv_carries_tag() {
        let gt = bx(1, 1, 5, 5);
        let recs = vec![record(rect_mask(8, 8, gt).to_map(), gt, vec![0.2, 0.8], 1)];
        let rep = MetricsReport::compute(&recs, Some("cpa+crf".into())).unwrap();
        let csv = rep.to_csv();
        assert!(csv.starts_with("metric,value\nloss_set,cpa+crf\n"));
        assert!(csv.contains("new_max_box_acc,1\n") && csv.contains("pxap,1\n"));
        assert_eq!(rep.top1_loc, Some(1.0));
    }

    fn arb_records() -> impl Strategy<Value = Vec<EvalRecord>> {
        prop::collection::vec(
            (
                prop::collection::vec(0u8..6, 36),
                0usize..3,
                0usize..3,
                1usize..4,
                1usize..4,
            ),
            1..5,
        )
        .prop_map(|items| {
            items
                .into_iter()
                .enumerate()
                .map(|(i, (vals, x, y, w, h))| {
                    let pred = Map::from_vec(6, 6, vals.iter().map(|&v| v as f64 / 5.0).collect()).unwrap();
                    let gt = bx(x, y, x + w, y + h);
                    let mask = rect_mask(6, 6, gt);
                    EvalRecord::new(format!("{i}"), vec![gt], Some(mask), pred, vec![], 0).unwrap()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn metric_invariants(recs in arb_records()) {
            let p = pxap(&recs).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            let accs: Vec<f64> = [0.1, 0.3, 0.5, 0.7, 0.9].iter().map(|&d| max_box_acc(&recs, d).unwrap()).collect();
            prop_assert!(accs.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(accs.iter().all(|a| (0.0..=1.0).contains(a)));

            let mut rev = recs.clone();
            rev.reverse();
            prop_assert_eq!(pxap(&rev).unwrap(), p);
            prop_assert_eq!(new_max_box_acc(&rev).unwrap(), new_max_box_acc(&recs).unwrap());

            // strictly monotone rescaling keeps the ranking
            let squashed: Vec<EvalRecord> = recs
                .iter()
                .map(|r| EvalRecord { pred_map: r.pred_map.map(|v| v * v * 0.5 + 0.1), ..r.clone() })
                .collect();
            prop_assert!((pxap(&squashed).unwrap() - p).abs() < 1e-12);
        }
    }
}
