//! Seeded random instances for oracle comparisons and gradient checks.

use super::SynthRng;
use crate::distill::{DistillBatch, DistillLayer, FeatureMap, Grid, Normalization};
use crate::map::{AnomalyMap, BinaryMask};
use crate::metrics::{Detection, GroundTruth, ScoredSample};
use crate::pseudolabel::{PixelBox, PseudoBox};

/// Random mask with set-pixel probability `density`, plus a map whose values
/// are drawn from a small set so equal maxima occur.
pub fn mask_and_map(
    rng: &mut SynthRng,
    height: usize,
    width: usize,
    density: f64,
) -> (BinaryMask, AnomalyMap) {
    let bits = (0..height * width)
        .map(|_| rng.uniform() < density)
        .collect();
    let values = (0..height * width)
        .map(|_| rng.int(0, 20) as f32 / 20.0)
        .collect();
    (
        BinaryMask::new(height, width, bits),
        AnomalyMap::new(height, width, values),
    )
}

/// Up to `max_n` boxes on a 64×64 canvas with coarse scores and areas so
/// that every tie-break rule gets exercised.
pub fn boxes(rng: &mut SynthRng, max_n: usize) -> Vec<PseudoBox> {
    let n = rng.int(0, max_n);
    (0..n)
        .map(|_| {
            let w = rng.int(1, 24);
            let h = rng.int(1, 24);
            PseudoBox {
                bbox: PixelBox {
                    x: rng.int(0, 64 - w),
                    y: rng.int(0, 64 - h),
                    w,
                    h,
                },
                score: rng.int(0, 8) as f64 / 8.0,
                area: rng.int(1, w * h),
                category_id: 1,
            }
        })
        .collect()
}

/// Between 2 and `max_n` samples with both labels present. With `ties`,
/// scores come from a handful of levels.
pub fn samples(rng: &mut SynthRng, max_n: usize, ties: bool) -> Vec<ScoredSample> {
    let n = rng.int(2, max_n.max(2));
    let mut out: Vec<ScoredSample> = (0..n)
        .map(|_| {
            let label = rng.uniform() < 0.4;
            let score = if ties {
                rng.int(0, 4) as f64 / 4.0
            } else {
                rng.uniform() + if label { 0.3 } else { 0.0 }
            };
            ScoredSample::new(score, label)
        })
        .collect();
    out[0].label = true;
    out[1].label = false;
    out
}

/// A small detection problem: a few images, jittered copies of the ground
/// truth plus spurious boxes, scores on a coarse grid.
pub fn detection_instance(rng: &mut SynthRng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let images = rng.int(1, 4) as u64;
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for image_id in 1..=images {
        for _ in 0..rng.int(0, 4) {
            let bbox = [
                rng.range(0.0, 80.0).round(),
                rng.range(0.0, 80.0).round(),
                rng.range(4.0, 30.0).round(),
                rng.range(4.0, 30.0).round(),
            ];
            gts.push(GroundTruth {
                image_id,
                bbox,
                class_id: 1,
            });
            for _ in 0..rng.int(0, 2) {
                let j = |v: f64, rng: &mut SynthRng| v + rng.range(-4.0, 4.0).round();
                dets.push(Detection {
                    image_id,
                    bbox: [
                        j(bbox[0], rng),
                        j(bbox[1], rng),
                        bbox[2].max(j(bbox[2], rng)),
                        bbox[3].max(j(bbox[3], rng)),
                    ],
                    class_id: 1,
                    score: rng.int(0, 10) as f64 / 10.0,
                });
            }
        }
        for _ in 0..rng.int(0, 3) {
            dets.push(Detection {
                image_id,
                bbox: [
                    rng.range(0.0, 80.0).round(),
                    rng.range(0.0, 80.0).round(),
                    rng.range(4.0, 30.0).round(),
                    rng.range(4.0, 30.0).round(),
                ],
                class_id: 1,
                score: rng.int(0, 10) as f64 / 10.0,
            });
        }
    }
    (dets, gts)
}

/// One to three random feature maps with strictly positive targets of the
/// same spatial size.
pub fn feature_batch(rng: &mut SynthRng) -> Vec<(FeatureMap, Grid)> {
    (0..rng.int(1, 3))
        .map(|_| {
            let (c, h, w) = (rng.int(1, 4), rng.int(2, 6), rng.int(2, 6));
            let f =
                FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.normal()).collect()).unwrap();
            let t = Grid::new(h, w, (0..h * w).map(|_| rng.range(0.05, 1.0)).collect());
            (f, t)
        })
        .collect()
}

/// The distillation batch for a set of features and targets.
pub fn distill_batch(layers: &[(FeatureMap, Grid)], normalization: Normalization) -> DistillBatch {
    DistillBatch {
        layers: layers
            .iter()
            .map(|(f, t)| DistillLayer {
                attention: crate::distill::attention_map(f),
                target: t.clone(),
            })
            .collect(),
        normalization,
    }
}
