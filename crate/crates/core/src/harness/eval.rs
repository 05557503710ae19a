//! Category-set recall and AP@0.5 with 11-point interpolation.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{synthesize_features, BenchData, Scene};
use crate::cem::topk_select;
use crate::error::Result;
use crate::geometry::{iou, Bbox};
use crate::model::{Detection, Detector};

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultilabelMetrics {
    pub precision: f64,
    pub recall: f64,
}

/// Per scene, `|TopK ∩ gt| / |gt|` and `|TopK ∩ gt| / min(top_k, K)`,
/// averaged over scenes. `scores[i]` belongs to `scenes[i]`.
pub fn evaluate_multilabel(scores: &[Vec<f64>], scenes: &[Scene], top_k: usize) -> MultilabelMetrics {
    assert_eq!(scores.len(), scenes.len(), "one score vector per scene");
    if scenes.is_empty() {
        return MultilabelMetrics { precision: 0.0, recall: 0.0 };
    }
    let (mut p, mut r) = (0.0, 0.0);
    for (s, scene) in scores.iter().zip(scenes) {
        let gt: BTreeSet<usize> = scene.objects.iter().map(|o| o.category).collect();
        let picked = topk_select(s, top_k);
        let hit = picked.iter().filter(|c| gt.contains(c)).count() as f64;
        r += if gt.is_empty() { 1.0 } else { hit / gt.len() as f64 };
        p += hit / top_k.min(s.len()).max(1) as f64;
    }
    let n = scenes.len() as f64;
    MultilabelMetrics { precision: p / n, recall: r / n }
}

/// A detection tagged with the image it was made on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub image: usize,
    #[serde(flatten)]
    pub detection: Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub category: usize,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
}

/// Descending score, then ascending category, then box coordinates, then image.
pub fn detection_order(a: &ImageDetection, b: &ImageDetection) -> Ordering {
    let (da, db) = (&a.detection, &b.detection);
    db.score
        .total_cmp(&da.score)
        .then(da.category_id.cmp(&db.category_id))
        .then_with(|| {
            da.bbox
                .to_array()
                .iter()
                .zip(db.bbox.to_array())
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.image.cmp(&b.image))
}

/// 11-point interpolated AP from ranked true/false positives.
pub fn interpolated_ap(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut curve = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    (0..=10)
        .map(|t| {
            let t = t as f64 / 10.0;
            curve.iter().filter(|(r, _)| *r >= t - 1e-12).map(|&(_, p)| p).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

fn overlap(a: &Bbox, b: &Bbox) -> f64 {
    iou(&a.to_corners(), &b.to_corners())
}

/// AP@0.5 for `category` over `scenes`: each detection in ranked order takes
/// the unmatched ground truth of its image with the highest IoU, if ≥ 0.5.
pub fn class_ap(category: usize, detections: &[ImageDetection], scenes: &[Scene]) -> ClassAp {
    let mut dets: Vec<ImageDetection> =
        detections.iter().filter(|d| d.detection.category_id == category).copied().collect();
    dets.sort_by(detection_order);
    let gts: Vec<(usize, Bbox)> = scenes
        .iter()
        .flat_map(|s| s.objects.iter().filter(|o| o.category == category).map(move |o| (s.image, o.bbox)))
        .collect();
    let mut taken = vec![false; gts.len()];
    let ranked: Vec<bool> = dets
        .iter()
        .map(|d| {
            let best = gts
                .iter()
                .enumerate()
                .filter(|(i, (img, _))| *img == d.image && !taken[*i])
                .map(|(i, (_, b))| (i, overlap(&d.detection.bbox, b)))
                .filter(|&(_, v)| v >= IOU_THRESHOLD)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((i, _)) => {
                    taken[i] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    ClassAp { category, ap: interpolated_ap(&ranked, gts.len()), n_gt: gts.len(), n_det: dets.len() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub per_class: Vec<ClassAp>,
    /// Mean over classes with at least one ground truth.
    pub mean_ap: f64,
}

/// Per-class AP where each category is scored only on the scenes whose
/// dataset contains it. `scopes[d][c]` says whether dataset `d` has `c`.
pub fn evaluate_detection(detections: &[ImageDetection], scenes: &[Scene], scopes: &[Vec<bool>]) -> DetectionMetrics {
    let k = scopes.first().map_or(0, Vec::len);
    let per_class: Vec<ClassAp> = (0..k)
        .into_par_iter()
        .map(|c| {
            let own: Vec<Scene> = scenes.iter().filter(|s| scopes[s.dataset][c]).cloned().collect();
            let images: BTreeSet<usize> = own.iter().map(|s| s.image).collect();
            let dets: Vec<ImageDetection> = detections.iter().filter(|d| images.contains(&d.image)).copied().collect();
            class_ap(c, &dets, &own)
        })
        .collect();
    let mean_ap = mean(per_class.iter().filter(|c| c.n_gt > 0).map(|c| c.ap));
    DetectionMetrics { per_class, mean_ap }
}

pub fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Where the detector's category set comes from at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CategorySource {
    /// Top-k of the category extractor.
    Extractor { top_k: usize },
    /// Every registered category, extractor bypassed.
    All,
}

/// Runs the detector and the extractor on every evaluation scene.
pub fn run_inference(
    model: &Detector,
    data: &BenchData,
    source: CategorySource,
) -> Result<(Vec<ImageDetection>, Vec<Vec<f64>>)> {
    let all: Vec<usize> = (0..model.k()).collect();
    let per_scene: Vec<(Vec<ImageDetection>, Vec<f64>)> = data
        .eval
        .par_iter()
        .map(|scene| {
            let f = synthesize_features(scene, &data.world.appearance);
            let scores = model.category_scores(&f)?;
            let ids = match source {
                CategorySource::Extractor { top_k } => topk_select(&scores, top_k),
                CategorySource::All => all.clone(),
            };
            let dets = model
                .detect_with_categories(&f, &ids, 0.0)?
                .into_iter()
                .map(|detection| ImageDetection { image: scene.image, detection })
                .collect();
            Ok((dets, scores))
        })
        .collect::<Result<_>>()?;
    let (dets, scores): (Vec<Vec<ImageDetection>>, Vec<Vec<f64>>) = per_scene.into_iter().unzip();
    Ok((dets.into_iter().flatten().collect(), scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub multilabel: MultilabelMetrics,
    pub detection: DetectionMetrics,
    pub per_dataset_ap: Vec<f64>,
}

pub fn evaluate(model: &Detector, data: &BenchData, source: CategorySource) -> Result<EvalSummary> {
    let (dets, scores) = run_inference(model, data, source)?;
    let top_k = match source {
        CategorySource::Extractor { top_k } => top_k,
        CategorySource::All => model.k(),
    };
    let multilabel = evaluate_multilabel(&scores, &data.eval, top_k);
    let scopes: Vec<Vec<bool>> = (0..data.world.label_space.datasets().len()).map(|d| data.world.scope(d)).collect();
    let detection = evaluate_detection(&dets, &data.eval, &scopes);
    let per_dataset_ap = scopes
        .iter()
        .map(|scope| mean(detection.per_class.iter().filter(|c| scope[c.category] && c.n_gt > 0).map(|c| c.ap)))
        .collect();
    Ok(EvalSummary { multilabel, detection, per_dataset_ap })
}
