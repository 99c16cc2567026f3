//! Anomaly maps to pseudo-defect boxes.
//!
//! Images whose image-level score falls below the classification threshold
//! are normal and yield no boxes. For the rest, the map is binarized at a
//! per-category threshold `T_k = μ_max − δ`, where `μ_max` is the mean of the
//! per-map maxima over every map in the category. Connected components of the
//! mask become boxes scored by the map values they cover; the best `top_k`
//! are kept and overlapping boxes are suppressed greedily.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::coco::{CocoAnnotation, CocoCategory, CocoDocument, CocoImage};
use crate::error::Result;
use crate::kead::ScoringConfig;
use crate::map::{AnomalyMap, BinaryMask};
use crate::metrics::box_iou;
use crate::pipeline::{with_threads, ImageScorer};
use crate::tensorio::DatasetManifest;

/// Category id and name every pseudo-box carries.
pub const PSEUDO_CATEGORY_ID: u64 = 1;
pub const PSEUDO_CATEGORY_NAME: &str = "anomaly";

#[derive(Debug, Error, PartialEq)]
pub enum PseudoLabelError {
    #[error("category {0} has no anomaly maps")]
    EmptyCategory(u64),
    #[error("image {0} has no anomaly map and no patch tokens to compute one")]
    MissingMap(u64),
    #[error("image {0} has no image-level score and no global token to compute one")]
    MissingScore(u64),
    #[error("category {0} has no text embeddings")]
    MissingEmbeddings(u64),
    #[error("no image carries a ground-truth mask")]
    MissingGtMasks,
    #[error("image {image_id}: map is {map:?} but expected {expected:?}")]
    SizeMismatch {
        image_id: u64,
        map: (usize, usize),
        expected: (usize, usize),
    },
    #[error("invalid threshold config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// How a component's box is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoxScore {
    #[default]
    Max,
    Mean,
}

/// Order of the two pruning stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PruneOrder {
    #[default]
    TopKThenNms,
    NmsThenTopK,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdConfig {
    pub delta: f64,
    pub min_component_area: usize,
    pub top_k: usize,
    pub nms_iou: f64,
    pub classify_threshold: f64,
    pub connectivity: Connectivity,
    pub box_score: BoxScore,
    pub order: PruneOrder,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            min_component_area: 4,
            top_k: 10,
            nms_iou: 0.5,
            classify_threshold: 0.5,
            connectivity: Connectivity::Eight,
            box_score: BoxScore::Max,
            order: PruneOrder::TopKThenNms,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<(), PseudoLabelError> {
        let bad = |m: String| Err(PseudoLabelError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.delta) {
            return bad(format!("delta must lie in [0, 1), got {}", self.delta));
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad(format!("nms_iou must lie in (0, 1], got {}", self.nms_iou));
        }
        if !self.classify_threshold.is_finite() {
            return bad("classify_threshold must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageClass {
    Normal,
    Defect,
}

/// Normal iff `as_x < classify_threshold`.
pub fn classify_image(as_x: f64, cfg: &ThresholdConfig) -> ImageClass {
    if as_x < cfg.classify_threshold {
        ImageClass::Normal
    } else {
        ImageClass::Defect
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryThreshold {
    pub category_id: u64,
    pub mu_max: f64,
    pub t_k: f64,
}

impl CategoryThreshold {
    /// Threshold from precomputed per-map maxima.
    pub fn from_maxima(
        category_id: u64,
        maxima: &[f64],
        delta: f64,
    ) -> Result<Self, PseudoLabelError> {
        if maxima.is_empty() {
            return Err(PseudoLabelError::EmptyCategory(category_id));
        }
        let mu_max = maxima.iter().sum::<f64>() / maxima.len() as f64;
        let t_k = mu_max - delta;
        if t_k <= 0.0 {
            log::warn!(
                "category {category_id}: threshold {t_k:.4} <= 0 (mean max {mu_max:.4}, delta {delta}); masks will be full"
            );
        }
        Ok(Self {
            category_id,
            mu_max,
            t_k,
        })
    }
}

pub fn category_threshold(
    category_id: u64,
    maps: &[AnomalyMap],
    delta: f64,
) -> Result<CategoryThreshold, PseudoLabelError> {
    let maxima = maps
        .iter()
        .map(|m| {
            m.max()
                .map(f64::from)
                .ok_or(PseudoLabelError::EmptyCategory(category_id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    CategoryThreshold::from_maxima(category_id, &maxima, delta)
}

/// Set where the map is at or above `t`.
pub fn binarize(map: &AnomalyMap, t: f64) -> BinaryMask {
    BinaryMask::new(
        map.height,
        map.width,
        map.values.iter().map(|&v| v as f64 >= t).collect(),
    )
}

/// Integer pixel rectangle, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn to_bbox(self) -> [f64; 4] {
        [self.x as f64, self.y as f64, self.w as f64, self.h as f64]
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.x..self.x + self.w).contains(&col) && (self.y..self.y + self.h).contains(&row)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// 1-based, in raster order of each component's first pixel.
    pub label_id: u32,
    pub area: usize,
    pub bbox: PixelBox,
    pub max_anomaly: f32,
    pub mean_anomaly: f64,
    /// `(x, y)` mean of member pixel coordinates.
    pub centroid: (f64, f64),
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) -> u32 {
    let (ra, rb) = (find(parent, a), find(parent, b));
    let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
    parent[hi as usize] = lo;
    lo
}

/// Two-pass union-find labelling. Returns a label per pixel (0 = background,
/// 1.. in raster order of first pixel) and the component count.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<u32>, usize) {
    let (h, w) = mask.dims();
    let mut labels = vec![0u32; h * w];
    let mut parent: Vec<u32> = vec![0];
    for r in 0..h {
        for c in 0..w {
            if !mask.bits[r * w + c] {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            let mut push = |rr: usize, cc: usize| {
                let l = labels[rr * w + cc];
                if l != 0 {
                    neighbours[n] = l;
                    n += 1;
                }
            };
            if c > 0 {
                push(r, c - 1);
            }
            if r > 0 {
                push(r - 1, c);
                if connectivity == Connectivity::Eight {
                    if c > 0 {
                        push(r - 1, c - 1);
                    }
                    if c + 1 < w {
                        push(r - 1, c + 1);
                    }
                }
            }
            labels[r * w + c] = if n == 0 {
                let id = parent.len() as u32;
                parent.push(id);
                id
            } else {
                let mut root = neighbours[0];
                for &l in &neighbours[1..n] {
                    root = union(&mut parent, root, l);
                }
                find(&mut parent, root)
            };
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut next = 0u32;
    for l in labels.iter_mut().filter(|l| **l != 0) {
        let root = find(&mut parent, *l) as usize;
        if remap[root] == 0 {
            next += 1;
            remap[root] = next;
        }
        *l = remap[root];
    }
    (labels, next as usize)
}

/// Connected components of `mask` with per-component statistics taken from `map`.
pub fn connected_components(
    mask: &BinaryMask,
    map: &AnomalyMap,
    connectivity: Connectivity,
) -> Result<Vec<Component>, PseudoLabelError> {
    if mask.dims() != map.dims() {
        return Err(PseudoLabelError::SizeMismatch {
            image_id: 0,
            map: map.dims(),
            expected: mask.dims(),
        });
    }
    let (labels, count) = label_components(mask, connectivity);
    struct Acc {
        area: usize,
        x0: usize,
        y0: usize,
        x1: usize,
        y1: usize,
        max: f32,
        sum: f64,
        sx: f64,
        sy: f64,
    }
    let mut acc: Vec<Acc> = (0..count)
        .map(|_| Acc {
            area: 0,
            x0: usize::MAX,
            y0: usize::MAX,
            x1: 0,
            y1: 0,
            max: f32::NEG_INFINITY,
            sum: 0.0,
            sx: 0.0,
            sy: 0.0,
        })
        .collect();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (r, c) = (i / mask.width, i % mask.width);
        let a = &mut acc[l as usize - 1];
        let v = map.values[i];
        a.area += 1;
        a.x0 = a.x0.min(c);
        a.y0 = a.y0.min(r);
        a.x1 = a.x1.max(c);
        a.y1 = a.y1.max(r);
        a.max = a.max.max(v);
        a.sum += v as f64;
        a.sx += c as f64;
        a.sy += r as f64;
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(i, a)| Component {
            label_id: i as u32 + 1,
            area: a.area,
            bbox: PixelBox {
                x: a.x0,
                y: a.y0,
                w: a.x1 - a.x0 + 1,
                h: a.y1 - a.y0 + 1,
            },
            max_anomaly: a.max,
            mean_anomaly: a.sum / a.area as f64,
            centroid: (a.sx / a.area as f64, a.sy / a.area as f64),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBox {
    pub bbox: PixelBox,
    pub score: f64,
    /// Pixel count of the source component.
    pub area: usize,
    pub category_id: u64,
}

/// Ranking used by both pruning stages: score descending, then larger area,
/// then top-left first in raster order.
pub fn rank_boxes(boxes: &mut [PseudoBox]) {
    boxes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.area.cmp(&a.area))
            .then(a.bbox.y.cmp(&b.bbox.y))
            .then(a.bbox.x.cmp(&b.bbox.x))
    });
}

/// Greedy suppression: keep the best remaining box, drop every other box
/// whose IoU with it exceeds `iou_threshold`, repeat.
pub fn nms(boxes: &[PseudoBox], iou_threshold: f64) -> Vec<PseudoBox> {
    let mut ranked = boxes.to_vec();
    rank_boxes(&mut ranked);
    let mut suppressed = vec![false; ranked.len()];
    let mut kept = Vec::new();
    for i in 0..ranked.len() {
        if suppressed[i] {
            continue;
        }
        let bi = ranked[i].bbox.to_bbox();
        for j in i + 1..ranked.len() {
            if !suppressed[j] && box_iou(&bi, &ranked[j].bbox.to_bbox()) > iou_threshold {
                suppressed[j] = true;
            }
        }
        kept.push(ranked[i].clone());
    }
    kept
}

pub fn components_to_boxes(components: &[Component], cfg: &ThresholdConfig) -> Vec<PseudoBox> {
    let mut boxes: Vec<PseudoBox> = components
        .iter()
        .filter(|c| c.area >= cfg.min_component_area)
        .map(|c| PseudoBox {
            bbox: c.bbox,
            score: match cfg.box_score {
                BoxScore::Max => c.max_anomaly as f64,
                BoxScore::Mean => c.mean_anomaly,
            },
            area: c.area,
            category_id: PSEUDO_CATEGORY_ID,
        })
        .collect();
    rank_boxes(&mut boxes);
    match cfg.order {
        PruneOrder::TopKThenNms => {
            boxes.truncate(cfg.top_k);
            nms(&boxes, cfg.nms_iou)
        }
        PruneOrder::NmsThenTopK => {
            let mut kept = nms(&boxes, cfg.nms_iou);
            kept.truncate(cfg.top_k);
            kept
        }
    }
}

/// Binarize, label and prune one map.
pub fn boxes_for_map(map: &AnomalyMap, threshold: f64, cfg: &ThresholdConfig) -> Vec<PseudoBox> {
    let mask = binarize(map, threshold);
    let comps = connected_components(&mask, map, cfg.connectivity)
        .expect("mask is built from the same map");
    components_to_boxes(&comps, cfg)
}

/// Per-category thresholds from every image's map, computed as a
/// reduction over all images before any binarization happens.
pub fn category_thresholds(
    manifest: &DatasetManifest,
    scorer: &ImageScorer,
    delta: f64,
) -> Result<BTreeMap<u64, CategoryThreshold>> {
    let maxima: Vec<(u64, f64)> = manifest
        .images
        .par_iter()
        .map(|img| {
            let map = scorer.anomaly_map(img)?;
            let max = map
                .max()
                .ok_or(PseudoLabelError::MissingMap(img.image_id))?;
            Ok((img.category_id, max as f64))
        })
        .collect::<Result<_>>()?;
    let mut grouped: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (c, m) in maxima {
        grouped.entry(c).or_default().push(m);
    }
    grouped
        .into_iter()
        .map(|(c, m)| Ok((c, CategoryThreshold::from_maxima(c, &m, delta)?)))
        .collect()
}

/// Builds the COCO pseudo-label document for a whole dataset.
///
/// Images are processed on `threads` workers; the output is independent of
/// the worker count.
pub fn generate_pseudo_labels(
    manifest: &DatasetManifest,
    cfg: &ThresholdConfig,
    scoring: &ScoringConfig,
    threads: usize,
) -> Result<CocoDocument> {
    cfg.validate()?;
    let scorer = ImageScorer::new(manifest, scoring)?;
    with_threads(threads, || {
        let thresholds = category_thresholds(manifest, &scorer, cfg.delta)?;
        let per_image: Vec<(u64, Vec<PseudoBox>)> = manifest
            .images
            .par_iter()
            .map(|img| {
                let as_x = scorer.image_score(img)?;
                if classify_image(as_x, cfg) == ImageClass::Normal {
                    return Ok((img.image_id, Vec::new()));
                }
                let map = scorer.anomaly_map(img)?;
                let t = thresholds[&img.category_id].t_k;
                Ok((img.image_id, boxes_for_map(&map, t, cfg)))
            })
            .collect::<Result<_>>()?;
        Ok(assemble(manifest, per_image))
    })?
}

fn assemble(manifest: &DatasetManifest, mut per_image: Vec<(u64, Vec<PseudoBox>)>) -> CocoDocument {
    per_image.sort_by_key(|(id, _)| *id);
    let mut images: Vec<CocoImage> = manifest
        .images
        .iter()
        .map(|img| CocoImage {
            id: img.image_id,
            width: img.width,
            height: img.height,
            file_name: img.display_name(),
        })
        .collect();
    images.sort_by_key(|i| i.id);
    let mut annotations = Vec::new();
    for (image_id, boxes) in per_image {
        for b in boxes {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id: b.category_id,
                bbox: b.bbox.to_bbox(),
                area: (b.bbox.w * b.bbox.h) as f64,
                score: Some(b.score),
                iscrowd: 0,
            });
        }
    }
    CocoDocument {
        images,
        annotations,
        categories: vec![CocoCategory {
            id: PSEUDO_CATEGORY_ID,
            name: PSEUDO_CATEGORY_NAME.into(),
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::oracle;
    use proptest::prelude::*;

    fn pb(x: usize, y: usize, w: usize, h: usize, score: f64) -> PseudoBox {
        PseudoBox {
            bbox: PixelBox { x, y, w, h },
            score,
            area: w * h,
            category_id: 1,
        }
    }

    #[test]
    fn classification_boundary() {
        let cfg = ThresholdConfig::default();
        assert_eq!(classify_image(0.3, &cfg), ImageClass::Normal);
        assert_eq!(classify_image(0.5, &cfg), ImageClass::Defect);
        assert_eq!(classify_image(0.9, &cfg), ImageClass::Defect);
    }

    #[test]
    fn thresholds() {
        let a = AnomalyMap::new(1, 2, vec![0.2, 0.9]);
        let b = AnomalyMap::new(1, 2, vec![0.7, 0.1]);
        let t = category_threshold(1, &[a.clone(), b], 0.1).unwrap();
        assert!((t.mu_max - 0.8).abs() < 1e-7 && (t.t_k - 0.7).abs() < 1e-7);
        assert_eq!(t.t_k, t.mu_max - 0.1);
        let single = category_threshold(1, &[AnomalyMap::new(1, 1, vec![0.5])], 0.1).unwrap();
        assert!((single.t_k - 0.4).abs() < 1e-12);
        let zero = category_threshold(1, &[a], 0.0).unwrap();
        assert_eq!(zero.t_k, zero.mu_max);
        assert_eq!(
            category_threshold(4, &[], 0.1),
            Err(PseudoLabelError::EmptyCategory(4))
        );
    }

    #[test]
    fn binarize_is_inclusive() {
        let m = AnomalyMap::new(1, 2, vec![0.4, 0.6]);
        assert_eq!(binarize(&m, 0.5).bits, vec![false, true]);
        assert_eq!(binarize(&m, 0.6).bits, vec![false, true]);
        assert_eq!(binarize(&m, 0.61).count(), 0);
    }

    #[test]
    fn single_pixel_component() {
        let mut mask = BinaryMask::empty(8, 8);
        mask.bits[3 * 8 + 5] = true;
        let map = AnomalyMap::filled(8, 8, 0.25);
        let comps = connected_components(&mask, &map, Connectivity::Eight).unwrap();
        assert_eq!(comps.len(), 1);
        assert_eq!(
            comps[0].bbox,
            PixelBox {
                x: 5,
                y: 3,
                w: 1,
                h: 1
            }
        );
        assert_eq!(comps[0].area, 1);
        assert_eq!(comps[0].centroid, (5.0, 3.0));
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let mask = BinaryMask::new(2, 2, vec![true, false, false, true]);
        let map = AnomalyMap::filled(2, 2, 1.0);
        assert_eq!(
            connected_components(&mask, &map, Connectivity::Eight)
                .unwrap()
                .len(),
            1
        );
        assert_eq!(
            connected_components(&mask, &map, Connectivity::Four)
                .unwrap()
                .len(),
            2
        );
        assert_eq!(oracle::flood_fill(&mask, false).1, 2);
        assert_eq!(oracle::flood_fill(&mask, true).1, 1);
    }

    #[test]
    fn u_shape_merges_late() {
        // Two arms that only join on the last row.
        let rows = ["#.#", "#.#", "###"];
        let bits: Vec<bool> = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        let mask = BinaryMask::new(3, 3, bits);
        let (labels, n) = label_components(&mask, Connectivity::Four);
        assert_eq!(n, 1);
        assert!(labels.iter().all(|&l| l <= 1));
    }

    #[test]
    fn top_k_keeps_best_scores() {
        let comps: Vec<Component> = (0..12)
            .map(|i| Component {
                label_id: i + 1,
                area: 4,
                bbox: PixelBox {
                    x: 4 * i as usize,
                    y: 0,
                    w: 2,
                    h: 2,
                },
                max_anomaly: 0.5 + 0.01 * i as f32,
                mean_anomaly: 0.5,
                centroid: (0.0, 0.0),
            })
            .collect();
        let boxes = components_to_boxes(&comps, &ThresholdConfig::default());
        assert_eq!(boxes.len(), 10);
        let xs: Vec<usize> = boxes.iter().map(|b| b.bbox.x / 4).collect();
        assert_eq!(xs, vec![11, 10, 9, 8, 7, 6, 5, 4, 3, 2]);

        let few = components_to_boxes(&comps[..3], &ThresholdConfig::default());
        assert_eq!(few.len(), 3);
    }

    #[test]
    fn small_components_are_dropped() {
        let comp = Component {
            label_id: 1,
            area: 3,
            bbox: PixelBox {
                x: 0,
                y: 0,
                w: 3,
                h: 1,
            },
            max_anomaly: 0.9,
            mean_anomaly: 0.9,
            centroid: (1.0, 0.0),
        };
        assert!(components_to_boxes(&[comp], &ThresholdConfig::default()).is_empty());
    }

    #[test]
    fn nms_cases() {
        let dup = [pb(0, 0, 10, 10, 0.8), pb(0, 0, 10, 10, 0.9)];
        let kept = nms(&dup, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let shifted = [pb(0, 0, 10, 10, 0.9), pb(5, 0, 10, 10, 0.8)];
        assert_eq!(nms(&shifted, 0.5).len(), 2);
        assert_eq!(nms(&shifted, 0.3).len(), 1);

        let disjoint = [
            pb(0, 0, 2, 2, 0.1),
            pb(5, 5, 2, 2, 0.2),
            pb(10, 0, 2, 2, 0.3),
        ];
        assert_eq!(nms(&disjoint, 0.01).len(), 3);
        // Only exact duplicates are suppressed at threshold 1.
        assert_eq!(nms(&dup, 1.0).len(), 2);
    }

    #[test]
    fn map_below_threshold_gives_nothing() {
        let m = AnomalyMap::filled(8, 8, 0.3);
        assert!(boxes_for_map(&m, 0.5, &ThresholdConfig::default()).is_empty());
    }

    fn mask_strategy() -> impl Strategy<Value = (BinaryMask, AnomalyMap)> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(any::<bool>(), h * w),
                proptest::collection::vec(0.0f32..1.0, h * w),
            )
                .prop_map(move |(b, v)| (BinaryMask::new(h, w, b), AnomalyMap::new(h, w, v)))
        })
    }

    proptest! {
        #[test]
        fn binarize_monotone(vals in proptest::collection::vec(0.0f32..1.0, 1..64), t1 in 0.0f64..1.0, dt in 0.0f64..0.5) {
            let m = AnomalyMap::new(1, vals.len(), vals);
            let lo = binarize(&m, t1);
            let hi = binarize(&m, t1 + dt);
            prop_assert!(hi.bits.iter().zip(&lo.bits).all(|(h, l)| !h || *l));
        }

        #[test]
        fn components_partition_set_pixels((mask, map) in mask_strategy(), eight in any::<bool>()) {
            let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
            let (labels, n) = label_components(&mask, conn);
            let comps = connected_components(&mask, &map, conn).unwrap();
            prop_assert_eq!(comps.len(), n);
            prop_assert_eq!(comps.iter().map(|c| c.area).sum::<usize>(), mask.count());
            for (i, &l) in labels.iter().enumerate() {
                prop_assert_eq!(l != 0, mask.bits[i]);
                if l != 0 {
                    prop_assert!(comps[l as usize - 1].bbox.contains(i / mask.width, i % mask.width));
                }
            }
            let (oracle_labels, oracle_n) = oracle::flood_fill(&mask, eight);
            prop_assert_eq!(n, oracle_n);
            prop_assert_eq!(labels, oracle_labels);
        }

        #[test]
        fn nms_output_is_pairwise_separated(
            raw in proptest::collection::vec((0usize..20, 0usize..20, 1usize..10, 1usize..10, 0.0f64..1.0), 0..30),
            thr in 0.05f64..1.0,
        ) {
            let boxes: Vec<PseudoBox> = raw.iter().map(|&(x, y, w, h, s)| pb(x, y, w, h, s)).collect();
            let kept = nms(&boxes, thr);
            prop_assert!(kept.len() <= boxes.len());
            for (i, a) in kept.iter().enumerate() {
                prop_assert!(boxes.contains(a));
                for b in &kept[i + 1..] {
                    prop_assert!(box_iou(&a.bbox.to_bbox(), &b.bbox.to_bbox()) <= thr);
                }
            }
            let cfg = ThresholdConfig { nms_iou: thr, min_component_area: 1, ..Default::default() };
            let comps: Vec<Component> = boxes.iter().enumerate().map(|(i, b)| Component {
                label_id: i as u32 + 1, area: b.area, bbox: b.bbox,
                max_anomaly: b.score as f32, mean_anomaly: b.score, centroid: (0.0, 0.0),
            }).collect();
            prop_assert!(components_to_boxes(&comps, &cfg).len() <= cfg.top_k);
        }

        #[test]
        fn threshold_shifts_with_maps(vals in proptest::collection::vec(0.0f32..1.0, 1..40), c in -0.5f32..0.5) {
            let maps: Vec<AnomalyMap> = vals.chunks(4).map(|v| AnomalyMap::new(1, v.len(), v.to_vec())).collect();
            let shifted: Vec<AnomalyMap> = maps.iter().map(|m| AnomalyMap::new(1, m.width, m.values.iter().map(|v| v + c).collect())).collect();
            let a = category_threshold(1, &maps, 0.1).unwrap();
            let b = category_threshold(1, &shifted, 0.1).unwrap();
            prop_assert!((b.t_k - a.t_k - c as f64).abs() < 1e-6);
        }
    }
}
