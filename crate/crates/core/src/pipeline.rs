//! Dataset-level drivers shared by the CLI: per-image scoring, the
//! dataset scoring pass and the δ sweep over mask IoU.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kead::{self, MemoryBank, PatchTokenSet, ScoringConfig, TextEmbeddingSet, TextTokens};
use crate::map::{AnomalyMap, BinaryMask};
use crate::metrics::mask_iou;
use crate::pseudolabel::{
    binarize, category_thresholds, classify_image, ImageClass, PseudoLabelError, ThresholdConfig,
};
use crate::tensorio::{read_tensor, write_tensor, DatasetManifest, ImageRecord};

/// Runs `f` on a dedicated pool of `threads` workers (0 = rayon default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Scores and maps of one image.
#[derive(Debug, Clone)]
pub struct ScoredImage {
    pub as_x: f64,
    pub map: AnomalyMap,
    pub final_score: f64,
}

/// Per-dataset scoring state: averaged text tokens and few-shot banks per
/// category, loaded once and shared read-only across workers.
pub struct ImageScorer<'a> {
    manifest: &'a DatasetManifest,
    cfg: ScoringConfig,
    text: BTreeMap<u64, TextTokens>,
    banks: BTreeMap<u64, MemoryBank>,
}

impl<'a> ImageScorer<'a> {
    pub fn new(manifest: &'a DatasetManifest, cfg: &ScoringConfig) -> Result<Self> {
        cfg.validate()?;
        let mut text = BTreeMap::new();
        for (key, paths) in &manifest.text_embeddings {
            let id: u64 = key
                .parse()
                .map_err(|_| Error::Invalid(format!("bad category key {key}")))?;
            let set = TextEmbeddingSet::new(
                id,
                read_tensor(manifest.resolve(&paths.normal))?,
                read_tensor(manifest.resolve(&paths.anomaly))?,
            )?;
            text.insert(id, set.tokens()?);
        }
        let mut banks = BTreeMap::new();
        for c in &manifest.categories {
            let refs = manifest.few_shot_refs_for(c.id);
            if refs.is_empty() {
                continue;
            }
            let sets = refs
                .iter()
                .map(|id| {
                    let img = manifest.image(*id).expect("validated reference");
                    load_tokens(manifest, img)?.ok_or_else(|| {
                        Error::Invalid(format!("few-shot reference {id} has no patch tokens"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            banks.insert(c.id, MemoryBank::new(&sets, cfg.bank_layers)?);
        }
        Ok(Self {
            manifest,
            cfg: cfg.clone(),
            text,
            banks,
        })
    }

    pub fn has_few_shot(&self, category_id: u64) -> bool {
        self.banks.contains_key(&category_id)
    }

    fn text_for(&self, category_id: u64) -> Result<&TextTokens> {
        self.text
            .get(&category_id)
            .ok_or_else(|| PseudoLabelError::MissingEmbeddings(category_id).into())
    }

    /// Computes the image-level score, anomaly map and final score from tokens.
    pub fn score_tokens(&self, img: &ImageRecord) -> Result<ScoredImage> {
        let text = self.text_for(img.category_id)?;
        let tokens =
            load_tokens(self.manifest, img)?.ok_or(PseudoLabelError::MissingMap(img.image_id))?;
        let as_x = kead::image_score(&tokens, text, &self.cfg)?;
        let mut map = kead::zero_shot_map(&tokens, text, &self.cfg, img.height, img.width)?;
        if let Some(bank) = self.banks.get(&img.category_id) {
            let few = kead::few_shot_map(&tokens, bank, img.height, img.width)?;
            map = kead::combined_map(&map, &few)?;
            if self.cfg.clip_map {
                kead::clip_unit(&mut map);
            }
        }
        let final_score = kead::final_score(&map, as_x)?;
        Ok(ScoredImage {
            as_x,
            map,
            final_score,
        })
    }

    /// The stored image-level score, or one computed from the global token.
    pub fn image_score(&self, img: &ImageRecord) -> Result<f64> {
        if let Some(s) = img.as_x {
            return Ok(s);
        }
        let cls = img
            .cls_token
            .as_ref()
            .ok_or(PseudoLabelError::MissingScore(img.image_id))?;
        let text = self.text_for(img.category_id)?;
        let cls = read_tensor(self.manifest.resolve(cls))?;
        let cls: Vec<f64> = cls.data().iter().map(|&v| v as f64).collect();
        Ok(kead::score_function(
            &cls,
            &text.normal,
            &text.anomaly,
            self.cfg.tau,
        )?)
    }

    /// The stored anomaly map, or one computed from the patch tokens.
    pub fn anomaly_map(&self, img: &ImageRecord) -> Result<AnomalyMap> {
        match &img.anomaly_map {
            Some(p) => {
                let map = AnomalyMap::from_tensor(read_tensor(self.manifest.resolve(p))?)?;
                if map.dims() != (img.height, img.width) {
                    return Err(PseudoLabelError::SizeMismatch {
                        image_id: img.image_id,
                        map: map.dims(),
                        expected: (img.height, img.width),
                    }
                    .into());
                }
                Ok(map)
            }
            None if img.patch_tokens.is_some() => Ok(self.score_tokens(img)?.map),
            None => Err(PseudoLabelError::MissingMap(img.image_id).into()),
        }
    }
}

/// Patch tokens and global token of an image, if it lists both.
pub fn load_tokens(manifest: &DatasetManifest, img: &ImageRecord) -> Result<Option<PatchTokenSet>> {
    let (Some(patch), Some(cls)) = (&img.patch_tokens, &img.cls_token) else {
        return Ok(None);
    };
    let grid = img.token_grid.map(|[r, c]| (r, c));
    Ok(Some(PatchTokenSet::new(
        read_tensor(manifest.resolve(patch))?,
        read_tensor(manifest.resolve(cls))?,
        grid,
    )?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScores {
    pub image_id: u64,
    pub as_x: f64,
    #[serde(rename = "as")]
    pub final_score: f64,
    pub map: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub tau: f64,
    pub few_shot: bool,
    pub images: Vec<ImageScores>,
}

fn rebase(path: &str, from: &Path, to: &Path) -> Result<String> {
    let abs = |p: &Path| {
        std::path::absolute(p).map_err(|e| Error::io(format!("resolving {}", p.display()), e))
    };
    let target = abs(&from.join(path))?;
    let rel = pathdiff::diff_paths(&target, abs(to)?)
        .ok_or_else(|| Error::Invalid(format!("cannot express {path} relative to output dir")))?;
    Ok(rel.to_string_lossy().replace('\\', "/"))
}

/// Scores every image that has patch tokens and writes `maps/<id>.npy`,
/// `scores.json` and an updated `manifest.json` into `out_dir`. The input
/// manifest and its files are left untouched.
pub fn score_dataset(
    manifest: &DatasetManifest,
    cfg: &ScoringConfig,
    out_dir: &Path,
    threads: usize,
) -> Result<ScoreReport> {
    let scorer = ImageScorer::new(manifest, cfg)?;
    if let Some(img) = manifest
        .images
        .iter()
        .find(|i| i.patch_tokens.is_some() && !scorer.text.contains_key(&i.category_id))
    {
        return Err(PseudoLabelError::MissingEmbeddings(img.category_id).into());
    }
    let maps_dir = out_dir.join("maps");
    fs::create_dir_all(&maps_dir)
        .map_err(|e| Error::io(format!("creating {}", maps_dir.display()), e))?;

    let scored: Vec<(u64, ScoredImage)> = with_threads(threads, || {
        manifest
            .images
            .par_iter()
            .filter(|img| img.patch_tokens.is_some())
            .map(|img| {
                let s = scorer.score_tokens(img)?;
                write_tensor(
                    maps_dir.join(format!("{}.npy", img.image_id)),
                    &s.map.to_tensor(),
                )?;
                Ok((img.image_id, s))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let by_id: BTreeMap<u64, ScoredImage> = scored.into_iter().collect();

    let mut out = manifest.clone();
    let (from, to) = (manifest.base_dir().to_path_buf(), out_dir.to_path_buf());
    for paths in out.text_embeddings.values_mut() {
        paths.normal = rebase(&paths.normal, &from, &to)?;
        paths.anomaly = rebase(&paths.anomaly, &from, &to)?;
    }
    for img in &mut out.images {
        for p in [
            &mut img.patch_tokens,
            &mut img.cls_token,
            &mut img.anomaly_map,
            &mut img.gt_mask,
        ]
        .into_iter()
        .flatten()
        {
            *p = rebase(p, &from, &to)?;
        }
        if let Some(s) = by_id.get(&img.image_id) {
            img.anomaly_map = Some(format!("maps/{}.npy", img.image_id));
            img.as_x = Some(s.as_x);
        }
    }
    out.set_base_dir(out_dir);
    out.save(out_dir.join("manifest.json"))?;

    let report = ScoreReport {
        tau: cfg.tau,
        few_shot: !scorer.banks.is_empty(),
        images: by_id
            .into_iter()
            .map(|(image_id, s)| ImageScores {
                image_id,
                as_x: s.as_x,
                final_score: s.final_score,
                map: format!("maps/{image_id}.npy"),
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    let path = out_dir.join("scores.json");
    fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub mean_iou: f64,
    pub images: usize,
}

/// Mean mask IoU against ground-truth masks for each δ. Images classified
/// normal contribute an empty predicted mask.
pub fn sweep_delta(
    manifest: &DatasetManifest,
    cfg: &ThresholdConfig,
    scoring: &ScoringConfig,
    deltas: &[f64],
    threads: usize,
) -> Result<Vec<SweepRow>> {
    let with_masks: Vec<&ImageRecord> = manifest
        .images
        .iter()
        .filter(|i| i.gt_mask.is_some())
        .collect();
    if with_masks.is_empty() {
        return Err(PseudoLabelError::MissingGtMasks.into());
    }
    if deltas.is_empty() {
        return Ok(Vec::new());
    }
    let scorer = ImageScorer::new(manifest, scoring)?;
    let ious: Vec<Vec<f64>> = with_threads(threads, || -> Result<Vec<Vec<f64>>> {
        let base = category_thresholds(manifest, &scorer, 0.0)?;
        with_masks
            .par_iter()
            .map(|img| {
                let gt_path = img.gt_mask.as_ref().expect("filtered");
                let gt = BinaryMask::from_tensor(read_tensor(manifest.resolve(gt_path))?)?;
                let defect = classify_image(scorer.image_score(img)?, cfg) == ImageClass::Defect;
                let map = scorer.anomaly_map(img)?;
                let mu = base[&img.category_id].mu_max;
                deltas
                    .iter()
                    .map(|d| {
                        let pred = if defect {
                            binarize(&map, mu - d)
                        } else {
                            BinaryMask::empty(map.height, map.width)
                        };
                        Ok(mask_iou(&pred, &gt)?)
                    })
                    .collect()
            })
            .collect()
    })??;
    Ok(deltas
        .iter()
        .enumerate()
        .map(|(k, &delta)| SweepRow {
            delta,
            mean_iou: ious.iter().map(|row| row[k]).sum::<f64>() / ious.len() as f64,
            images: ious.len(),
        })
        .collect())
}
