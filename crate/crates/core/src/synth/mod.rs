//! Deterministic synthetic datasets with planted defects.
//!
//! Each image gets an anomaly map made of a flat background plus Gaussian
//! noise, with zero or more defects planted on top (Gaussian bumps or flat
//! rectangles). Ground truth for a bump is the tight box of pixels where the
//! noiseless bump reaches half its peak; for a rectangle it is the rectangle.
//!
//! The random stream is xoshiro256** seeded through splitmix64. Uniforms use
//! the top 53 bits of each output and normals use the cosine branch of
//! Box–Muller, so any implementation following the same recipe reproduces
//! the fixtures bit for bit.

pub mod cases;
pub mod oracle;

use std::fs;
use std::path::Path;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde_json::{json, Map};

use crate::error::{Error, Result};
use crate::map::{AnomalyMap, BinaryMask};
use crate::tensorio::{
    write_tensor, Category, DatasetManifest, ImageLabel, ImageRecord, Tensor, TextEmbeddingPaths,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectGeometry {
    Rect,
    GaussianBump,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub categories: usize,
    /// Inclusive range of defects planted in a defective image.
    pub defects_per_image: (usize, usize),
    pub geometry: DefectGeometry,
    pub peak: f64,
    /// Mean of the background noise.
    pub background: f64,
    pub noise_sigma: f64,
    pub defect_free_fraction: f64,
    /// Bump standard deviation range in pixels.
    pub sigma_range: (f64, f64),
    /// Rectangle side range in pixels.
    pub rect_range: (usize, usize),
    /// Also emit patch/global tokens and text embeddings.
    pub tokens: Option<TokenSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenSpec {
    pub grid: usize,
    pub dim: usize,
}

impl Default for TokenSpec {
    fn default() -> Self {
        Self { grid: 16, dim: 32 }
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            num_images: 200,
            height: 256,
            width: 256,
            categories: 2,
            defects_per_image: (1, 3),
            geometry: DefectGeometry::GaussianBump,
            peak: 0.9,
            background: 0.2,
            noise_sigma: 0.05,
            defect_free_fraction: 0.3,
            sigma_range: (4.0, 10.0),
            rect_range: (8, 40),
            tokens: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synth: {m}")));
        if self.height == 0 || self.width == 0 || self.categories == 0 {
            return bad("sizes and category count must be positive");
        }
        let (lo, hi) = self.defects_per_image;
        if lo == 0 || lo > hi {
            return bad("defects per image must be a range 1 <= lo <= hi");
        }
        let floor = self.background + 4.0 * self.noise_sigma;
        if self.peak.partial_cmp(&floor) != Some(std::cmp::Ordering::Greater) {
            return bad("peak must exceed background + 4 sigma");
        }
        if !(0.0..=1.0).contains(&self.defect_free_fraction) {
            return bad("defect-free fraction must lie in [0, 1]");
        }
        if !(self.sigma_range.0 > 0.0 && self.sigma_range.0 <= self.sigma_range.1) {
            return bad("invalid bump sigma range");
        }
        if self.rect_range.0 == 0 || self.rect_range.0 > self.rect_range.1 {
            return bad("invalid rectangle size range");
        }
        let (need_h, need_w) = match self.geometry {
            DefectGeometry::GaussianBump => {
                let s = (6.0 * self.sigma_range.1).ceil() as usize + 2;
                (s, s)
            }
            DefectGeometry::Rect => (self.rect_range.1, self.rect_range.1),
        };
        if self.height < need_h || self.width < need_w {
            return bad("map too small for the largest defect");
        }
        if let Some(t) = self.tokens {
            if t.grid == 0 || t.dim < 4 {
                return bad("token grid must be >= 1 and dim >= 4");
            }
        }
        Ok(())
    }
}

/// Portable random stream.
pub struct SynthRng(Xoshiro256StarStar);

impl SynthRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256StarStar::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + ((self.uniform() * (hi - lo + 1) as f64) as usize).min(hi - lo)
    }

    /// Standard normal via the cosine branch of Box–Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Defect {
    Bump {
        cx: f64,
        cy: f64,
        sigma: f64,
    },
    Rect {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
    },
}

impl Defect {
    /// Noiseless defect intensity at the centre of pixel `(r, c)`.
    fn value(&self, r: usize, c: usize, peak: f64) -> f64 {
        match *self {
            Defect::Bump { cx, cy, sigma } => {
                let dx = c as f64 + 0.5 - cx;
                let dy = r as f64 + 0.5 - cy;
                peak * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
            }
            Defect::Rect { x, y, w, h } => {
                if (x..x + w).contains(&c) && (y..y + h).contains(&r) {
                    peak
                } else {
                    0.0
                }
            }
        }
    }

    /// Pixel window `(r0, r1, c0, c1)` (exclusive ends) outside which the
    /// defect contributes nothing measurable.
    fn window(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        match *self {
            Defect::Bump { cx, cy, sigma } => {
                let reach = 5.0 * sigma;
                let lo = |v: f64| (v - reach).floor().max(0.0) as usize;
                let hi = |v: f64, n: usize| ((v + reach).ceil() as usize).min(n);
                (lo(cy), hi(cy, height), lo(cx), hi(cx, width))
            }
            Defect::Rect { x, y, w, h } => (y, y + h, x, x + w),
        }
    }

    fn overlaps(&self, other: &Defect) -> bool {
        match (self, other) {
            (
                Defect::Bump { cx, cy, sigma },
                Defect::Bump {
                    cx: ox,
                    cy: oy,
                    sigma: os,
                },
            ) => (cx - ox).hypot(cy - oy) < 3.0 * (sigma + os),
            (
                Defect::Rect { x, y, w, h },
                Defect::Rect {
                    x: ox,
                    y: oy,
                    w: ow,
                    h: oh,
                },
            ) => {
                const GAP: usize = 4;
                x + w + GAP > *ox && ox + ow + GAP > *x && y + h + GAP > *oy && oy + oh + GAP > *y
            }
            _ => true,
        }
    }
}

/// One generated image before it is written out.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub category_id: u64,
    pub map: AnomalyMap,
    pub gt_mask: BinaryMask,
    /// `[x, y, w, h]` per planted defect.
    pub gt_boxes: Vec<[usize; 4]>,
    /// Noiseless defect intensity, used for token synthesis.
    clean: Vec<f64>,
}

impl SynthImage {
    pub fn is_defective(&self) -> bool {
        !self.gt_boxes.is_empty()
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;

fn place(spec: &SynthSpec, rng: &mut SynthRng, placed: &[Defect]) -> Option<Defect> {
    for _ in 0..PLACEMENT_ATTEMPTS {
        let d = match spec.geometry {
            DefectGeometry::GaussianBump => {
                let sigma = rng.range(spec.sigma_range.0, spec.sigma_range.1);
                let margin = 3.0 * sigma + 1.0;
                Defect::Bump {
                    cx: rng.range(margin, spec.width as f64 - margin),
                    cy: rng.range(margin, spec.height as f64 - margin),
                    sigma,
                }
            }
            DefectGeometry::Rect => {
                let w = rng.int(spec.rect_range.0, spec.rect_range.1);
                let h = rng.int(spec.rect_range.0, spec.rect_range.1);
                Defect::Rect {
                    x: rng.int(0, spec.width - w),
                    y: rng.int(0, spec.height - h),
                    w,
                    h,
                }
            }
        };
        if !placed.iter().any(|p| p.overlaps(&d)) {
            return Some(d);
        }
    }
    None
}

/// Generates image `index` (0-based), advancing `rng`.
fn generate_image(spec: &SynthSpec, index: usize, rng: &mut SynthRng) -> SynthImage {
    let (h, w) = (spec.height, spec.width);
    let defect_free = rng.uniform() < spec.defect_free_fraction;
    let mut defects = Vec::new();
    if !defect_free {
        let n = rng.int(spec.defects_per_image.0, spec.defects_per_image.1);
        for _ in 0..n {
            if let Some(d) = place(spec, rng, &defects) {
                defects.push(d);
            }
        }
    }

    let mut clean = vec![0.0f64; h * w];
    let mut gt_mask = BinaryMask::empty(h, w);
    let mut gt_boxes = Vec::new();
    for d in &defects {
        let (r0, r1, c0, c1) = d.window(h, w);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for r in r0..r1 {
            for c in c0..c1 {
                let v = d.value(r, c, spec.peak);
                clean[r * w + c] += v;
                if v >= spec.peak / 2.0 {
                    gt_mask.bits[r * w + c] = true;
                    x0 = x0.min(c);
                    y0 = y0.min(r);
                    x1 = x1.max(c);
                    y1 = y1.max(r);
                }
            }
        }
        if x0 <= x1 {
            gt_boxes.push([x0, y0, x1 - x0 + 1, y1 - y0 + 1]);
        }
    }

    let values = clean
        .iter()
        .map(|&v| (spec.background + v + spec.noise_sigma * rng.normal()).clamp(0.0, 1.0) as f32)
        .collect();
    SynthImage {
        category_id: (index % spec.categories) as u64 + 1,
        map: AnomalyMap::new(h, w, values),
        gt_mask,
        gt_boxes,
        clean,
    }
}

/// Generates every image in memory, in order.
pub fn generate_images(spec: &SynthSpec) -> Result<Vec<SynthImage>> {
    spec.validate()?;
    let mut rng = SynthRng::new(spec.seed);
    Ok((0..spec.num_images)
        .map(|i| generate_image(spec, i, &mut rng))
        .collect())
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn perturbed(base: &[f64], scale: f64, rng: &mut SynthRng) -> Vec<f64> {
    unit(base.iter().map(|b| b + scale * rng.normal()).collect())
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(format!("writing {}", path.display()), e)
}

/// Writes a dataset into `out_dir` and returns its manifest (also saved as
/// `out_dir/manifest.json`). Output bytes depend only on `spec`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let images = generate_images(spec)?;
    for sub in ["maps", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }

    let categories = (1..=spec.categories as u64)
        .map(|id| Category {
            id,
            name: format!("synthetic-{id}"),
            object: format!("synthetic surface {id}"),
            extra: Map::new(),
        })
        .collect();
    let mut manifest = DatasetManifest::new(categories);
    manifest.extra.insert(
        "generator".into(),
        json!({ "kind": "synth", "seed": spec.seed }),
    );

    // Token streams use their own generator so maps are identical with or
    // without tokens.
    let mut token_rng = SynthRng::new(spec.seed ^ 0x746f_6b65_6e73);
    let mut text_tokens = Vec::new();
    if let Some(t) = spec.tokens {
        let d = out_dir.join("text");
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        let d = out_dir.join("tokens");
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        for c in 1..=spec.categories as u64 {
            let mut normal_base = vec![0.0; t.dim];
            normal_base[0] = 1.0;
            let mut anomaly_base = vec![0.0; t.dim];
            anomaly_base[1] = 1.0;
            let normal: Vec<f64> = (0..2)
                .flat_map(|_| perturbed(&normal_base, 0.05, &mut token_rng))
                .collect();
            let anomaly: Vec<f64> = (0..3)
                .flat_map(|_| perturbed(&anomaly_base, 0.05, &mut token_rng))
                .collect();
            let (np, ap) = (
                format!("text/{c}_normal.npy"),
                format!("text/{c}_anomaly.npy"),
            );
            write_tensor(
                out_dir.join(&np),
                &Tensor::new(vec![2, t.dim], f32s(&normal))?,
            )?;
            write_tensor(
                out_dir.join(&ap),
                &Tensor::new(vec![3, t.dim], f32s(&anomaly))?,
            )?;
            manifest.text_embeddings.insert(
                c.to_string(),
                TextEmbeddingPaths {
                    normal: np,
                    anomaly: ap,
                    extra: Map::new(),
                },
            );
            text_tokens.push((normal_base, anomaly_base));
        }
    }

    for (i, img) in images.iter().enumerate() {
        let id = i as u64 + 1;
        let map_path = format!("maps/{id}.npy");
        let mask_path = format!("masks/{id}.npy");
        write_tensor(out_dir.join(&map_path), &img.map.to_tensor())?;
        write_tensor(out_dir.join(&mask_path), &img.gt_mask.to_tensor())?;

        let mut rec = ImageRecord::new(id, img.category_id, spec.width, spec.height);
        rec.file_name = Some(format!("{id:05}.png"));
        rec.anomaly_map = Some(map_path);
        rec.gt_mask = Some(mask_path);
        rec.gt_boxes = Some(
            img.gt_boxes
                .iter()
                .map(|b| [b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64, 1.0])
                .collect(),
        );
        rec.label = if img.is_defective() {
            ImageLabel::Defect
        } else {
            ImageLabel::Normal
        };
        rec.as_x = Some(if img.is_defective() { 1.0 } else { 0.0 });

        if let Some(t) = spec.tokens {
            let (normal, anomaly) = &text_tokens[img.category_id as usize - 1];
            let (patch, cls) = synth_tokens(spec, t, img, normal, anomaly, &mut token_rng);
            let (pp, cp) = (
                format!("tokens/{id}_patch.npy"),
                format!("tokens/{id}_cls.npy"),
            );
            write_tensor(out_dir.join(&pp), &patch)?;
            write_tensor(out_dir.join(&cp), &cls)?;
            rec.patch_tokens = Some(pp);
            rec.cls_token = Some(cp);
            rec.token_grid = Some([t.grid, t.grid]);
        }
        manifest.images.push(rec);
    }

    manifest.set_base_dir(out_dir);
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Patch tokens interpolate between the normal and anomaly directions by the
/// noiseless defect intensity at each patch centre.
fn synth_tokens(
    spec: &SynthSpec,
    t: TokenSpec,
    img: &SynthImage,
    normal: &[f64],
    anomaly: &[f64],
    rng: &mut SynthRng,
) -> (Tensor, Tensor) {
    let m = t.grid * t.grid;
    let mut data = Vec::with_capacity(4 * m * t.dim);
    for _layer in 0..4 {
        for p in 0..m {
            let (gr, gc) = (p / t.grid, p % t.grid);
            let r = ((gr as f64 + 0.5) * spec.height as f64 / t.grid as f64) as usize;
            let c = ((gc as f64 + 0.5) * spec.width as f64 / t.grid as f64) as usize;
            let alpha = (img.clean[r * spec.width + c] / spec.peak).clamp(0.0, 1.0);
            let mixed: Vec<f64> = normal
                .iter()
                .zip(anomaly)
                .map(|(n, a)| (1.0 - alpha) * n + alpha * a)
                .collect();
            data.extend(f32s(&perturbed(&mixed, 0.05, rng)));
        }
    }
    let cls_base = if img.is_defective() { anomaly } else { normal };
    let cls = perturbed(cls_base, 0.05, rng);
    (
        Tensor::new(vec![4, m, t.dim], data).expect("token dims"),
        Tensor::new(vec![t.dim], f32s(&cls)).expect("cls dims"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_images: 10,
            height: 96,
            width: 96,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(&small(), a.path()).unwrap();
        generate(&small(), b.path()).unwrap();
        for f in ["manifest.json", "maps/1.npy", "maps/10.npy", "masks/3.npy"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn all_defect_free() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            defect_free_fraction: 1.0,
            ..small()
        };
        let m = generate(&spec, dir.path()).unwrap();
        assert!(m.images.iter().all(|i| i.label == ImageLabel::Normal));
        assert!(m
            .images
            .iter()
            .all(|i| i.gt_boxes.as_ref().unwrap().is_empty()));
    }

    #[test]
    fn maps_are_unit_range_and_boxes_cover_half_peak() {
        for geometry in [DefectGeometry::GaussianBump, DefectGeometry::Rect] {
            let spec = SynthSpec {
                geometry,
                ..small()
            };
            for img in generate_images(&spec).unwrap() {
                assert!(img.map.values.iter().all(|v| (0.0..=1.0).contains(v)));
                let covered: usize = img.gt_boxes.iter().map(|b| b[2] * b[3]).sum();
                assert!(covered >= img.gt_mask.count());
            }
        }
    }

    #[test]
    fn rejects_unrecoverable_peak() {
        let spec = SynthSpec {
            peak: 0.3,
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rng_is_reproducible_and_in_range() {
        let mut a = SynthRng::new(7);
        let mut b = SynthRng::new(7);
        for _ in 0..1000 {
            let u = a.uniform();
            assert_eq!(u, b.uniform());
            assert!((0.0..1.0).contains(&u));
            let k = a.int(3, 5);
            assert_eq!(k, b.int(3, 5));
            assert!((3..=5).contains(&k));
        }
    }
}
