use std::collections::BTreeMap;

use super::{iou, BBox, Dataset, Detection, HeadVars, Object, SCORE_THRESHOLD};
use crate::netgraph::{Detector, NUM_CLASSES};
use crate::tensor::{Graph, Mode, Tensor};
use crate::{Error, Result};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];
const RECALL_POINTS: usize = 101;

/// AP of one class at one IoU threshold.
///
/// `dets` are `(scene, score, box)`; `gts[s]` are the class's truth boxes in
/// scene `s`. Detections are matched in descending score order (stable in
/// input order) to the unmatched truth of highest IoU; precision is
/// interpolated at 101 recall points.
pub fn average_precision(dets: &[(usize, f64, BBox)], gts: &[Vec<BBox>], threshold: f64) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (k, &i) in order.iter().enumerate() {
        let (scene, _, ref bbox) = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts[scene].iter().enumerate() {
            if used[scene][j] {
                continue;
            }
            let v = iou(bbox, gt);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[scene][j] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total as f64);
    }
    // precision envelope, right to left
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < recall.len() && recall[k] < target {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Mean AP over IoU thresholds and over the classes that have truths.
pub fn eval_map(preds: &[Vec<Detection>], truths: &[Vec<Object>]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::input(format!("{} prediction lists for {} scenes", preds.len(), truths.len())));
    }
    let mut aps = Vec::new();
    for c in 0..NUM_CLASSES {
        let gts: Vec<Vec<BBox>> =
            truths.iter().map(|t| t.iter().filter(|o| o.class_id == c).map(|o| o.bbox).collect()).collect();
        if gts.iter().all(Vec::is_empty) {
            continue;
        }
        let dets: Vec<(usize, f64, BBox)> = preds
            .iter()
            .enumerate()
            .flat_map(|(s, p)| p.iter().filter(|d| d.class_id == c).map(move |d| (s, d.score, d.bbox)))
            .collect();
        for &t in &IOU_THRESHOLDS {
            aps.push(average_precision(&dets, &gts, t));
        }
    }
    if aps.is_empty() {
        return Ok(0.0);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Eval-mode detections for every scene of `data` at `res`.
pub fn predict(det: &Detector, data: &Dataset, res: usize, batch: usize) -> Result<Vec<Vec<Detection>>> {
    det.arch.check_resolution(res, res)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch.max(1)) {
        let (images, _) = data.batch(chunk, res);
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(images);
        let o = det.forward(&mut g, x)?;
        let head = HeadVars::new(&mut g, &o, res, res)?;
        out.extend(head.outputs(&g).iter().map(|h| h.detections(SCORE_THRESHOLD)));
    }
    Ok(out)
}

/// Scenes used to recalibrate BN statistics before an evaluation.
pub const CALIBRATION_SCENES: usize = 64;

/// Images of the first [`CALIBRATION_SCENES`] scenes of `data` at `res`.
pub fn calibration_batch(data: &Dataset, res: usize) -> Tensor {
    let idx: Vec<usize> = (0..data.len().min(CALIBRATION_SCENES)).collect();
    data.batch(&idx, res).0
}

/// mAP at `res` of a copy of `det` whose BN statistics were first
/// recalibrated at `res` on scenes from `calib`. Training mixes
/// resolutions, so the running statistics fit none of them exactly.
/// Copies of `teacher` with BN statistics calibrated at each resolution.
pub fn calibrated_teachers(teacher: &Detector, data: &Dataset, resolutions: &[usize]) -> Result<BTreeMap<usize, Detector>> {
    let mut out = BTreeMap::new();
    for &r in resolutions {
        let mut t = teacher.clone();
        t.recalibrate_bn(&calibration_batch(data, r))?;
        out.insert(r, t);
    }
    Ok(out)
}

pub fn evaluate_calibrated(det: &Detector, calib: &Dataset, data: &Dataset, res: usize) -> Result<f64> {
    if calib.is_empty() {
        return Err(Error::input("empty calibration set"));
    }
    det.arch.check_resolution(res, res)?;
    let mut d = det.clone();
    d.recalibrate_bn(&calibration_batch(calib, res))?;
    evaluate(&d, data, res)
}

/// mAP of `det` on `data` at `res`, using its stored BN statistics.
pub fn evaluate(det: &Detector, data: &Dataset, res: usize) -> Result<f64> {
    let preds = predict(det, data, res, 16)?;
    let truths: Vec<Vec<Object>> = data.layouts.iter().map(|l| l.objects_at(res)).collect();
    eval_map(&preds, &truths)
}
