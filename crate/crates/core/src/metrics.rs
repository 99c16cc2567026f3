//! Evaluation metrics: image/pixel AUROC, mask IoU, box IoU and COCO-style
//! average precision (101-point interpolation).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::map::{AnomalyMap, BinaryMask};
use crate::tensorio::DatasetManifest;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUROC needs at least one positive and one negative sample")]
    DegenerateLabels,
    #[error("size mismatch: {left:?} vs {right:?}")]
    SizeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite score")]
    NonFinite,
}

type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
}

impl ScoredSample {
    pub fn new(score: f64, label: bool) -> Self {
        Self { score, label }
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic,
/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, via average ranks in O(n log n).
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let positives = samples.iter().filter(|s| s.label).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::DegenerateLabels);
    }

    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // Sum of 1-based average ranks of the positives, doubled to stay integral.
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let pos_in_group = sorted[i..j].iter().filter(|s| s.label).count() as u128;
        // Ranks i+1 ..= j average to (i + 1 + j) / 2.
        rank_sum_x2 += pos_in_group * (i as u128 + 1 + j as u128);
        i = j;
    }
    let (p, n) = (positives as u128, negatives as u128);
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * n) as f64)
}

/// AUROC over all pixels of all maps, optionally sampling every `stride`-th
/// row and column.
pub fn pixel_auroc(maps: &[AnomalyMap], masks: &[BinaryMask], stride: usize) -> Result<f64> {
    let stride = stride.max(1);
    let mut samples = Vec::new();
    for (m, g) in maps.iter().zip(masks) {
        if m.dims() != g.dims() {
            return Err(MetricsError::SizeMismatch {
                left: m.dims(),
                right: g.dims(),
            });
        }
        for r in (0..m.height).step_by(stride) {
            for c in (0..m.width).step_by(stride) {
                samples.push(ScoredSample::new(m.get(r, c) as f64, g.get(r, c)));
            }
        }
    }
    if maps.len() != masks.len() {
        return Err(MetricsError::SizeMismatch {
            left: (maps.len(), 0),
            right: (masks.len(), 0),
        });
    }
    auroc(&samples)
}

/// `|pred ∧ gt| / |pred ∨ gt|`, defined as 1 when both masks are empty.
pub fn mask_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(MetricsError::SizeMismatch {
            left: pred.dims(),
            right: gt.dims(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.bits.iter().zip(&gt.bits) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Axis-aligned box `[x, y, w, h]` with top-left origin.
pub type BBox = [f64; 4];

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_id: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
    pub class_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each detection in score order.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Ground-truth boxes listed in a manifest. The fifth box element is the
/// class id.
pub fn manifest_ground_truths(manifest: &DatasetManifest) -> Vec<GroundTruth> {
    manifest
        .images
        .iter()
        .flat_map(|img| {
            img.gt_boxes.iter().flatten().map(move |b| GroundTruth {
                image_id: img.image_id,
                bbox: [b[0], b[1], b[2], b[3]],
                class_id: b[4] as u64,
            })
        })
        .collect()
}

/// Recall levels 0.00, 0.01, …, 1.00.
pub fn recall_levels() -> impl Iterator<Item = f64> {
    (0..=100).map(|i| i as f64 / 100.0)
}

/// AP of one class slice. Detections are matched greedily in descending
/// score order (ties keep input order) to the unmatched ground truth of
/// highest IoU ≥ `iou_thresh` in the same image.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> PrCurve {
    if gts.is_empty() {
        return PrCurve {
            points: Vec::new(),
            ap: 0.0,
        };
    }
    let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut matched = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::with_capacity(dets.len());
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for &g in by_image
            .get(&det.image_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
        {
            if matched[g] {
                continue;
            }
            let iou = box_iou(&det.bbox, &gts[g].bbox);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                matched[g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (tp + fp) as f64));
    }

    // Precision envelope: running max from the right.
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in recall_levels() {
        while k < points.len() && points[k].0 < r {
            k += 1;
        }
        if k < points.len() {
            sum += envelope[k];
        }
    }
    PrCurve {
        points,
        ap: sum / 101.0,
    }
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    pub ap50: f64,
    pub ap5095: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanAp {
    pub map50: f64,
    pub map5095: f64,
    pub per_class: BTreeMap<u64, ClassAp>,
}

/// mAP@0.5 and mAP@0.5:0.95, averaged over the classes that have ground truth.
pub fn mean_ap(dets: &[Detection], gts: &[GroundTruth]) -> MeanAp {
    let classes: BTreeSet<u64> = gts.iter().map(|g| g.class_id).collect();
    let thresholds = coco_iou_thresholds();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let d: Vec<Detection> = dets.iter().filter(|d| d.class_id == c).cloned().collect();
        let g: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == c).cloned().collect();
        let aps: Vec<f64> = thresholds
            .iter()
            .map(|&t| average_precision(&d, &g, t).ap)
            .collect();
        per_class.insert(
            c,
            ClassAp {
                ap50: aps[0],
                ap5095: aps.iter().sum::<f64>() / aps.len() as f64,
            },
        );
    }
    let n = per_class.len().max(1) as f64;
    MeanAp {
        map50: per_class.values().map(|c| c.ap50).sum::<f64>() / n,
        map5095: per_class.values().map(|c| c.ap5095).sum::<f64>() / n,
        per_class,
    }
}
