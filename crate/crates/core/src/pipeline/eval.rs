//! COCO-style average precision and the stage-truncation / convergence
//! experiments built on it.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::{Detector, PipelineError};
use crate::decoder::StageOutput;
use crate::geometry::{iou, BoxCXCYWH};
use crate::matching_loss::Target;
use crate::numerics::{Graph, Params, Scalar};

pub const SCORE_THRESHOLD: f64 = 0.05;
/// IoU thresholds 0.50, 0.55, …, 0.95.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];
const RECALL_POINTS: usize = 101;

/// One scored box on one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BoxCXCYWH<f64>,
}

/// AP averaged over IoU thresholds 0.5:0.05:0.95, plus AP50, AP75 and
/// per-class AP (`None` for classes without ground truth).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Detections of one stage's outputs: sigmoid scores above `threshold`,
/// the `top_n` highest kept.
pub fn detections_from_stage<T: Scalar>(out: &StageOutput<'_, T>, image: usize, threshold: f64, top_n: usize) -> Vec<Detection> {
    let logits = out.logits.value().cast::<f64>();
    let boxes = out.boxes.value().cast::<f64>();
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut dets = Vec::new();
    for i in 0..n {
        let b = boxes.row(i);
        let bbox = BoxCXCYWH::new(b[0], b[1], b[2], b[3]);
        for c in 0..k {
            let score = 1.0 / (1.0 + (-logits.at(&[i, c])).exp());
            if score > threshold {
                dets.push(Detection { image, class: c, score, bbox });
            }
        }
    }
    dets.sort_by(detection_order);
    dets.truncate(top_n);
    dets
}

/// Score descending with a total tie-break on content, so results never
/// depend on the order detections arrive in.
fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image.cmp(&b.image))
        .then(a.class.cmp(&b.class))
        .then_with(|| {
            a.bbox
                .to_array()
                .iter()
                .zip(b.bbox.to_array().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// COCO AP of one class at one IoU threshold with 101-point interpolated
/// precision; `dets` must already be in [`detection_order`].
fn class_ap(dets: &[&Detection], gts: &[Vec<BoxCXCYWH<f64>>], threshold: f64) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[d.image].iter().enumerate() {
            if taken[d.image][j] {
                continue;
            }
            let o = iou(d.bbox.to_xyxy(), g.to_xyxy());
            if o >= threshold && best.map_or(true, |(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, _)) => {
                taken[d.image][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / total as f64);
    }
    // Monotone precision envelope.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while idx < recall.len() && recall[idx] < level - 1e-12 {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// COCO-style AP over `targets[i]` (image `i`); classes without any ground
/// truth are excluded from the means.
pub fn average_precision(detections: &[Detection], targets: &[Target], num_classes: usize) -> Result<APReport, PipelineError> {
    if targets.is_empty() {
        return Err(PipelineError::Dataset("evaluation set is empty".into()));
    }
    if let Some(d) = detections.iter().find(|d| d.image >= targets.len() || d.class >= num_classes) {
        return Err(PipelineError::Dataset(format!(
            "detection on image {} class {} is outside the evaluation set",
            d.image, d.class
        )));
    }
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| detection_order(a, b));
    let mut per_class = Vec::with_capacity(num_classes);
    let mut per_threshold = vec![Vec::new(); IOU_THRESHOLDS.len()];
    for c in 0..num_classes {
        let gts: Vec<Vec<BoxCXCYWH<f64>>> = targets
            .iter()
            .map(|t| {
                t.classes
                    .iter()
                    .zip(&t.boxes)
                    .filter(|(&k, _)| k == c)
                    .map(|(_, b)| *b)
                    .collect()
            })
            .collect();
        if gts.iter().all(Vec::is_empty) {
            per_class.push(None);
            continue;
        }
        let dets: Vec<&Detection> = sorted.iter().copied().filter(|d| d.class == c).collect();
        let aps: Vec<f64> = IOU_THRESHOLDS.iter().map(|&t| class_ap(&dets, &gts, t)).collect();
        for (slot, &a) in per_threshold.iter_mut().zip(&aps) {
            slot.push(a);
        }
        per_class.push(Some(aps.iter().sum::<f64>() / aps.len() as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(PipelineError::Dataset("evaluation set has no ground-truth objects".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(APReport {
        ap: mean(&present),
        ap50: mean(&per_threshold[0]),
        ap75: mean(&per_threshold[5]),
        per_class,
    })
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub num_images: usize,
    pub score_threshold: f64,
    /// Detections kept per image; defaults to the number of proposals.
    pub top_n: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            num_images: 200,
            score_threshold: SCORE_THRESHOLD,
            top_n: None,
        }
    }
}

fn eval_images(dataset: &dyn Dataset, opts: &EvalOptions) -> Result<usize, PipelineError> {
    let n = dataset.len().map_or(opts.num_images, |l| l.min(opts.num_images));
    if n == 0 {
        return Err(PipelineError::Dataset("evaluation set is empty".into()));
    }
    Ok(n)
}

/// AP of every truncation depth `1..=max_stages` from one decoding pass per
/// image: stage `k` never depends on later stages, so the `k`-th output is
/// exactly the `k`-stage model's prediction.
pub fn evaluate_stages<T: Scalar>(
    model: &Detector,
    params: &Params<T>,
    dataset: &dyn Dataset,
    max_stages: usize,
    opts: &EvalOptions,
) -> Result<Vec<APReport>, PipelineError> {
    if max_stages == 0 || max_stages > model.cfg.n_stages {
        return Err(PipelineError::Config(format!(
            "inference depth {max_stages} outside 1..={}",
            model.cfg.n_stages
        )));
    }
    let n = eval_images(dataset, opts)?;
    let top_n = opts.top_n.unwrap_or(model.cfg.num_proposals);
    let per_image: Vec<Result<(Target, Vec<Vec<Detection>>), PipelineError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = dataset.get(i as u64)?;
            let g = Graph::new();
            let outs = model.forward(&g, params, &s.image.cast::<T>(), max_stages)?;
            let dets = outs
                .iter()
                .map(|o| detections_from_stage(o, i, opts.score_threshold, top_n))
                .collect();
            Ok((s.target, dets))
        })
        .collect();
    let mut targets = Vec::with_capacity(n);
    let mut by_stage: Vec<Vec<Detection>> = vec![Vec::new(); max_stages];
    for r in per_image {
        let (t, dets) = r?;
        targets.push(t);
        for (acc, d) in by_stage.iter_mut().zip(dets) {
            acc.extend(d);
        }
    }
    by_stage
        .iter()
        .map(|d| average_precision(d, &targets, dataset.num_classes()))
        .collect()
}

/// AP of the model truncated to `stages` decoding stages.
pub fn evaluate<T: Scalar>(
    model: &Detector,
    params: &Params<T>,
    dataset: &dyn Dataset,
    stages: usize,
    opts: &EvalOptions,
) -> Result<APReport, PipelineError> {
    let mut all = evaluate_stages(model, params, dataset, stages, opts)?;
    Ok(all.pop().expect("at least one stage"))
}

pub const STAGE_CURVE_HEADER: [&str; 4] = ["stage_count", "AP", "AP50", "AP75"];
pub const CONVERGENCE_HEADER: [&str; 2] = ["iteration", "AP"];

pub fn stage_curve_rows(reports: &[APReport]) -> Vec<Vec<String>> {
    reports
        .iter()
        .enumerate()
        .map(|(k, r)| vec![(k + 1).to_string(), r.ap.to_string(), r.ap50.to_string(), r.ap75.to_string()])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(v: [f64; 4]) -> BoxCXCYWH<f64> {
        BoxCXCYWH::from_f64(v)
    }

    fn target(classes: Vec<usize>, boxes: Vec<BoxCXCYWH<f64>>) -> Target {
        Target { classes, boxes }
    }

    #[test]
    fn perfect_predictions() {
        let t = vec![
            target(vec![0, 1], vec![b([0.3, 0.3, 0.2, 0.2]), b([0.7, 0.7, 0.2, 0.3])]),
            target(vec![1], vec![b([0.5, 0.5, 0.4, 0.4])]),
        ];
        let dets: Vec<Detection> = t
            .iter()
            .enumerate()
            .flat_map(|(i, t)| {
                t.classes.iter().zip(&t.boxes).map(move |(&c, &bb)| Detection {
                    image: i,
                    class: c,
                    score: 1.0,
                    bbox: bb,
                })
            })
            .collect();
        let r = average_precision(&dets, &t, 2).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (1.0, 1.0, 1.0));
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn no_predictions() {
        let t = vec![target(vec![0], vec![b([0.5, 0.5, 0.2, 0.2])])];
        let r = average_precision(&[], &t, 3).unwrap();
        assert_eq!((r.ap, r.ap50, r.ap75), (0.0, 0.0, 0.0));
        assert_eq!(r.per_class, vec![Some(0.0), None, None]);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(average_precision(&[], &[], 3).is_err());
    }

    #[test]
    fn single_match_at_iou_0_6() {
        // GT [0, 0, 1, 1] (xyxy, scaled by 0.5); the prediction is shifted
        // right so intersection/union = 0.75/1.25 = 0.6.
        let gt = b([0.25, 0.25, 0.5, 0.5]);
        let pred = b([0.375, 0.25, 0.5, 0.5]);
        assert!((iou(gt.to_xyxy(), pred.to_xyxy()) - 0.6).abs() < 1e-12);
        let t = vec![target(vec![0], vec![gt])];
        let d = [Detection { image: 0, class: 0, score: 0.9, bbox: pred }];
        let r = average_precision(&d, &t, 1).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.ap75, 0.0);
        // Thresholds 0.50, 0.55 and 0.60 pass.
        assert!((r.ap - 0.3).abs() < 1e-12);
    }

    #[test]
    fn false_positive_ranked_first_halves_precision() {
        let gt = b([0.5, 0.5, 0.2, 0.2]);
        let t = vec![target(vec![0], vec![gt])];
        let d = [
            Detection { image: 0, class: 0, score: 0.9, bbox: b([0.1, 0.1, 0.1, 0.1]) },
            Detection { image: 0, class: 0, score: 0.8, bbox: gt },
        ];
        let r = average_precision(&d, &t, 1).unwrap();
        assert!((r.ap50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ordering_invariant() {
        let t = vec![target(vec![0, 0], vec![b([0.3, 0.3, 0.2, 0.2]), b([0.6, 0.6, 0.2, 0.2])])];
        let mut d = vec![
            Detection { image: 0, class: 0, score: 0.5, bbox: b([0.31, 0.3, 0.2, 0.2]) },
            Detection { image: 0, class: 0, score: 0.5, bbox: b([0.3, 0.3, 0.2, 0.2]) },
            Detection { image: 0, class: 0, score: 0.7, bbox: b([0.62, 0.6, 0.2, 0.2]) },
            Detection { image: 0, class: 0, score: 0.2, bbox: b([0.9, 0.9, 0.1, 0.1]) },
        ];
        let a = average_precision(&d, &t, 1).unwrap();
        d.reverse();
        assert_eq!(average_precision(&d, &t, 1).unwrap(), a);
        d.swap(0, 2);
        assert_eq!(average_precision(&d, &t, 1).unwrap(), a);
    }
}
