//! Naive reference implementations for tests.
//!
//! Each function restates a production operation with the most direct
//! algorithm available (BFS flood fill, quadratic scans, per-prefix
//! rematching, tent-weight sums) and shares no helpers with the production
//! code paths it is compared against.

use std::collections::VecDeque;

use crate::map::BinaryMask;
use crate::metrics::{Detection, GroundTruth, ScoredSample};
use crate::pseudolabel::PseudoBox;

/// Labels set pixels by breadth-first flood fill, seeding in raster order.
/// Returns per-pixel labels (0 = background) and the component count.
pub fn flood_fill(mask: &BinaryMask, eight_connected: bool) -> (Vec<u32>, usize) {
    let (h, w) = (mask.height as i64, mask.width as i64);
    let mut labels = vec![0u32; mask.bits.len()];
    let mut count = 0u32;
    for start in 0..mask.bits.len() {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p as i64 / w, p as i64 % w);
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    if (dr == 0 && dc == 0) || (!eight_connected && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h || nc >= w {
                        continue;
                    }
                    let q = (nr * w + nc) as usize;
                    if mask.bits[q] && labels[q] == 0 {
                        labels[q] = count;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleComponent {
    pub area: usize,
    /// `(x, y, w, h)`
    pub bbox: (usize, usize, usize, usize),
    pub max: f32,
}

/// Statistics per label by rescanning the whole grid for each label.
pub fn component_stats(
    labels: &[u32],
    count: usize,
    width: usize,
    values: &[f32],
) -> Vec<OracleComponent> {
    (1..=count as u32)
        .map(|l| {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == l).collect();
            let xs = members.iter().map(|&i| i % width);
            let ys = members.iter().map(|&i| i / width);
            let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap());
            let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap());
            let max = members
                .iter()
                .map(|&i| values[i])
                .fold(f32::NEG_INFINITY, f32::max);
            OracleComponent {
                area: members.len(),
                bbox: (x0, y0, x1 - x0 + 1, y1 - y0 + 1),
                max,
            }
        })
        .collect()
}

fn pixel_iou(a: &PseudoBox, b: &PseudoBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a.bbox.x, a.bbox.y, a.bbox.x + a.bbox.w, a.bbox.y + a.bbox.h);
    let (bx0, by0, bx1, by1) = (b.bbox.x, b.bbox.y, b.bbox.x + b.bbox.w, b.bbox.y + b.bbox.h);
    let iw = ax1.min(bx1).saturating_sub(ax0.max(bx0));
    let ih = ay1.min(by1).saturating_sub(ay0.max(by0));
    let inter = iw * ih;
    let union = a.bbox.w * a.bbox.h + b.bbox.w * b.bbox.h - inter;
    inter as f64 / union as f64
}

/// True when `a` outranks `b`: higher score, then larger area, then
/// smaller row, then smaller column.
fn outranks(a: &PseudoBox, b: &PseudoBox) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.area != b.area {
        return a.area > b.area;
    }
    if a.bbox.y != b.bbox.y {
        return a.bbox.y < b.bbox.y;
    }
    a.bbox.x < b.bbox.x
}

/// Quadratic NMS: repeatedly pick the best remaining box by linear scan,
/// then discard every remaining box overlapping it by more than `thresh`.
pub fn nms(boxes: &[PseudoBox], thresh: f64) -> Vec<PseudoBox> {
    let mut remaining: Vec<PseudoBox> = boxes.to_vec();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if outranks(&remaining[i], &remaining[best]) {
                best = i;
            }
        }
        let chosen = remaining.remove(best);
        remaining.retain(|b| pixel_iou(&chosen, b) <= thresh);
        kept.push(chosen);
    }
    kept
}

/// AUROC by counting all positive/negative pairs.
pub fn auroc(samples: &[ScoredSample]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for p in samples.iter().filter(|s| s.label) {
        for n in samples.iter().filter(|s| !s.label) {
            pairs += 1.0;
            if p.score > n.score {
                wins += 1.0;
            } else if p.score == n.score {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let x0 = a[0].max(b[0]);
    let y0 = a[1].max(b[1]);
    let x1 = (a[0] + a[2]).min(b[0] + b[2]);
    let y1 = (a[1] + a[3]).min(b[1] + b[3]);
    let inter = if x1 > x0 && y1 > y0 {
        (x1 - x0) * (y1 - y0)
    } else {
        0.0
    };
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

/// True positives among the first `k` detections (already ranked), matching
/// from scratch.
fn true_positives(ranked: &[&Detection], gts: &[GroundTruth], thresh: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for d in ranked {
        let mut best: Option<usize> = None;
        let mut best_iou = f64::NEG_INFINITY;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != d.image_id {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= thresh && v > best_iou {
                best = Some(g);
                best_iou = v;
            }
        }
        if let Some(g) = best {
            used[g] = true;
            tp += 1;
        }
    }
    tp
}

/// Precision/recall after every rank cutoff, each cutoff rematched from
/// scratch, and 101-point interpolated AP taken as the max precision over
/// all points at or beyond each recall level.
pub fn pr(dets: &[Detection], gts: &[GroundTruth], thresh: f64) -> (f64, Vec<(f64, f64)>) {
    if gts.is_empty() {
        return (0.0, Vec::new());
    }
    // Stable selection sort by descending score.
    let mut ranked: Vec<&Detection> = Vec::new();
    let mut pool: Vec<&Detection> = dets.iter().collect();
    while !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            if pool[i].score > pool[best].score {
                best = i;
            }
        }
        ranked.push(pool.remove(best));
    }
    let points: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|k| {
            let tp = true_positives(&ranked[..k], gts, thresh);
            (tp as f64 / gts.len() as f64, tp as f64 / k as f64)
        })
        .collect();
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        total += best;
    }
    (total / 101.0, points)
}

/// Half-pixel-centre bilinear resize written as a sum of tent weights over
/// every source pixel.
pub fn bilinear(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |d: usize, s_len: usize, d_len: usize| {
        let s = (d as f64 + 0.5) * s_len as f64 / d_len as f64 - 0.5;
        s.max(0.0).min((s_len - 1) as f64)
    };
    let tent = |s: f64, i: usize| (1.0 - (s - i as f64).abs()).max(0.0);
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let sy = coord(y, sh, dh);
        for x in 0..dw {
            let sx = coord(x, sw, dw);
            let mut acc = 0.0;
            for r in 0..sh {
                for c in 0..sw {
                    acc += tent(sy, r) * tent(sx, c) * src[r * sw + c] as f64;
                }
            }
            out.push(acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudolabel::PixelBox;

    #[test]
    fn empty_mask_has_no_components() {
        assert_eq!(flood_fill(&BinaryMask::empty(4, 4), true).1, 0);
    }

    #[test]
    fn single_box_survives() {
        let b = PseudoBox {
            bbox: PixelBox {
                x: 1,
                y: 2,
                w: 3,
                h: 4,
            },
            score: 0.5,
            area: 12,
            category_id: 1,
        };
        assert_eq!(nms(std::slice::from_ref(&b), 0.5), vec![b]);
    }
}
