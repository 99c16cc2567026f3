use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use agssp_core::coco::CocoDocument;
use agssp_core::distill::{
    attention_map, cosine_distill_loss, l2_distill_loss, resize_target, DistillBatch, DistillLayer,
    FeatureMap, Normalization,
};
use agssp_core::kead::{final_score, ScoringConfig};
use agssp_core::metrics::{auroc, manifest_ground_truths, mean_ap, pixel_auroc, ScoredSample};
use agssp_core::pipeline::{score_dataset, sweep_delta, with_threads, ImageScorer};
use agssp_core::pseudolabel::{generate_pseudo_labels, ThresholdConfig};
use agssp_core::synth::{self, SynthSpec};
use agssp_core::tensorio::{ImageLabel, ImageRecord};
use agssp_core::{read_tensor, write_tensor, AnomalyMap, BinaryMask, DatasetManifest, Tensor};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, Result};

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    Ok(DatasetManifest::load(path)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("creating {}", dir.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| CliError::Io(format!("writing {}", path.display()), e))
}

fn pretty(value: &impl Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Writes JSON to `out`, or to standard output when no path is given.
fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_text(p, &pretty(value)),
        None => {
            print!("{}", pretty(value));
            Ok(())
        }
    }
}

pub fn score(manifest: &Path, cfg: &ScoringConfig, out: &Path, threads: usize) -> Result<()> {
    let m = load_manifest(manifest)?;
    create_dir(out)?;
    let report = score_dataset(&m, cfg, out, threads)?;
    log::info!(
        "scored {} images ({}) into {}",
        report.images.len(),
        if report.few_shot {
            "zero + few-shot"
        } else {
            "zero-shot"
        },
        out.display()
    );
    Ok(())
}

pub fn boxes(
    manifest: &Path,
    scoring: &ScoringConfig,
    cfg: &ThresholdConfig,
    out: &Path,
    threads: usize,
) -> Result<()> {
    let m = load_manifest(manifest)?;
    let doc = generate_pseudo_labels(&m, cfg, scoring, threads)?;
    log::info!(
        "{} pseudo-boxes over {} images at delta {}",
        doc.annotations.len(),
        doc.images.len(),
        cfg.delta
    );
    write_text(out, &doc.to_json())
}

#[derive(Debug, Serialize)]
struct TargetRecord {
    image_id: u64,
    layer: usize,
    height: usize,
    width: usize,
    target: String,
    loss_l2: Option<f64>,
    loss_cos: Option<f64>,
    lambda_example: Option<f64>,
}

/// Parses `56` or `56x40` into `(height, width)`.
pub fn parse_layer_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("invalid layer size {s:?}"))
    };
    match s.split_once('x') {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

fn feature_paths(img: &ImageRecord) -> Result<Option<Vec<String>>> {
    match img.extra.get("features") {
        None => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_str().map(str::to_owned).ok_or_else(|| {
                    CliError::Usage(format!(
                        "image {}: features must be a list of paths",
                        img.image_id
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Some(_) => Err(CliError::Usage(format!(
            "image {}: features must be a list of paths",
            img.image_id
        ))),
    }
}

fn load_features(
    m: &DatasetManifest,
    img: &ImageRecord,
    layers: &[(usize, usize)],
) -> Result<Option<Vec<FeatureMap>>> {
    let Some(paths) = feature_paths(img)? else {
        return Ok(None);
    };
    if paths.len() != layers.len() {
        return Err(CliError::Usage(format!(
            "image {}: {} feature files for {} layers",
            img.image_id,
            paths.len(),
            layers.len()
        )));
    }
    paths
        .iter()
        .zip(layers)
        .map(|(p, &(h, w))| {
            let t = read_tensor(m.resolve(p))?;
            match *t.shape() {
                [c, fh, fw] if (fh, fw) == (h, w) => Ok(FeatureMap::new(
                    c,
                    h,
                    w,
                    t.data().iter().map(|&v| v as f64).collect(),
                )?),
                ref s => Err(CliError::Usage(format!(
                    "image {}: feature {p} has shape {s:?}, expected (C, {h}, {w})",
                    img.image_id
                ))),
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub struct DistillArgs<'a> {
    pub manifest: &'a Path,
    pub scoring: &'a ScoringConfig,
    pub layers: &'a [(usize, usize)],
    pub normalization: Normalization,
    pub task_loss: Option<f64>,
    pub out: &'a Path,
    pub threads: usize,
}

pub fn distill_targets(a: DistillArgs) -> Result<()> {
    if a.layers.is_empty() {
        return Err(CliError::Usage(
            "at least one layer size is required".into(),
        ));
    }
    let m = load_manifest(a.manifest)?;
    let scorer = ImageScorer::new(&m, a.scoring)?;
    let targets_dir = a.out.join("targets");
    create_dir(&targets_dir)?;
    let per_image: Vec<Vec<TargetRecord>> = with_threads(a.threads, || {
        m.images
            .par_iter()
            .map(|img| -> Result<Vec<TargetRecord>> {
                let map = scorer.anomaly_map(img)?;
                let features = load_features(&m, img, a.layers)?;
                let mut records = Vec::with_capacity(a.layers.len());
                for (l, &(h, w)) in a.layers.iter().enumerate() {
                    let target = resize_target(&map, h, w);
                    let rel = format!("targets/{}_l{l}.npy", img.image_id);
                    let data = target.values.iter().map(|&v| v as f32).collect();
                    write_tensor(a.out.join(&rel), &Tensor::new(vec![h, w], data)?)?;
                    let (mut loss_l2, mut loss_cos) = (None, None);
                    if let Some(f) = &features {
                        let batch = DistillBatch {
                            layers: vec![DistillLayer {
                                attention: attention_map(&f[l]),
                                target,
                            }],
                            normalization: a.normalization,
                        };
                        loss_l2 = Some(l2_distill_loss(&batch)?.loss);
                        loss_cos = Some(cosine_distill_loss(&batch)?.loss);
                    }
                    let lambda_example = match (loss_l2, a.task_loss) {
                        (Some(ld), Some(lt)) => {
                            Some(agssp_core::distill::compute_lambda(ld, lt)?.lambda)
                        }
                        _ => None,
                    };
                    records.push(TargetRecord {
                        image_id: img.image_id,
                        layer: l,
                        height: h,
                        width: w,
                        target: rel,
                        loss_l2,
                        loss_cos,
                        lambda_example,
                    });
                }
                Ok(records)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut records: Vec<TargetRecord> = per_image.into_iter().flatten().collect();
    records.sort_by_key(|r| (r.image_id, r.layer));
    log::info!("wrote {} distillation targets", records.len());
    write_text(&a.out.join("targets.json"), &pretty(&records))
}

#[derive(Debug, Serialize)]
struct MetricReport {
    metric: &'static str,
    value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    map5095: Option<f64>,
    per_class: BTreeMap<u64, Value>,
}

/// Image score used for image-level AUROC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ImageScoreKind {
    /// Global-token score only.
    AsX,
    /// Map maximum plus the global-token score.
    Final,
}

pub fn eval_auroc(
    manifest: &Path,
    scoring: &ScoringConfig,
    kind: ImageScoreKind,
    threads: usize,
    out: Option<&Path>,
) -> Result<()> {
    let m = load_manifest(manifest)?;
    let scorer = ImageScorer::new(&m, scoring)?;
    let labelled: Vec<&ImageRecord> = m
        .images
        .iter()
        .filter(|i| i.label != ImageLabel::Unknown)
        .collect();
    let scored: Vec<(u64, ScoredSample)> = with_threads(threads, || {
        labelled
            .par_iter()
            .map(|img| -> agssp_core::Result<(u64, ScoredSample)> {
                let as_x = scorer.image_score(img)?;
                let s = match kind {
                    ImageScoreKind::AsX => as_x,
                    ImageScoreKind::Final => final_score(&scorer.anomaly_map(img)?, as_x)?,
                };
                Ok((
                    img.category_id,
                    ScoredSample::new(s, img.label == ImageLabel::Defect),
                ))
            })
            .collect::<agssp_core::Result<Vec<_>>>()
    })??;
    let all: Vec<ScoredSample> = scored.iter().map(|(_, s)| *s).collect();
    let value = auroc(&all)?;
    let mut grouped: BTreeMap<u64, Vec<ScoredSample>> = BTreeMap::new();
    for (c, s) in scored {
        grouped.entry(c).or_default().push(s);
    }
    let per_class = grouped
        .into_iter()
        .map(|(c, s)| (c, auroc(&s).map_or(Value::Null, |v| json!(v))))
        .collect();
    emit(
        &MetricReport {
            metric: "auroc",
            value,
            map5095: None,
            per_class,
        },
        out,
    )
}

pub fn eval_pixel_auroc(
    manifest: &Path,
    scoring: &ScoringConfig,
    stride: usize,
    threads: usize,
    out: Option<&Path>,
) -> Result<()> {
    let m = load_manifest(manifest)?;
    let scorer = ImageScorer::new(&m, scoring)?;
    let pairs: Vec<(u64, AnomalyMap, BinaryMask)> = with_threads(threads, || {
        m.images
            .par_iter()
            .filter(|i| i.gt_mask.is_some())
            .map(|img| -> agssp_core::Result<_> {
                let gt = read_tensor(m.resolve(img.gt_mask.as_deref().expect("filtered")))?;
                Ok((
                    img.category_id,
                    scorer.anomaly_map(img)?,
                    BinaryMask::from_tensor(gt)?,
                ))
            })
            .collect::<agssp_core::Result<Vec<_>>>()
    })??;
    if pairs.is_empty() {
        return Err(agssp_core::pseudolabel::PseudoLabelError::MissingGtMasks.into());
    }
    let split = |ps: &[&(u64, AnomalyMap, BinaryMask)]| {
        let maps: Vec<AnomalyMap> = ps.iter().map(|p| p.1.clone()).collect();
        let masks: Vec<BinaryMask> = ps.iter().map(|p| p.2.clone()).collect();
        pixel_auroc(&maps, &masks, stride)
    };
    let all: Vec<_> = pairs.iter().collect();
    let value = split(&all)?;
    let mut per_class = BTreeMap::new();
    for c in pairs
        .iter()
        .map(|p| p.0)
        .collect::<std::collections::BTreeSet<_>>()
    {
        let subset: Vec<_> = pairs.iter().filter(|p| p.0 == c).collect();
        per_class.insert(c, split(&subset).map_or(Value::Null, |v| json!(v)));
    }
    emit(
        &MetricReport {
            metric: "pixel-auroc",
            value,
            map5095: None,
            per_class,
        },
        out,
    )
}

pub fn eval_iou(
    manifest: &Path,
    scoring: &ScoringConfig,
    cfg: &ThresholdConfig,
    threads: usize,
    out: Option<&Path>,
) -> Result<()> {
    let m = load_manifest(manifest)?;
    let value = sweep_delta(&m, cfg, scoring, &[cfg.delta], threads)?[0].mean_iou;
    let mut per_class = BTreeMap::new();
    for c in &m.categories {
        let mut sub = m.clone();
        sub.images.retain(|i| i.category_id == c.id);
        if sub.images.iter().any(|i| i.gt_mask.is_some()) {
            per_class.insert(
                c.id,
                json!(sweep_delta(&sub, cfg, scoring, &[cfg.delta], threads)?[0].mean_iou),
            );
        }
    }
    emit(
        &MetricReport {
            metric: "iou",
            value,
            map5095: None,
            per_class,
        },
        out,
    )
}

pub fn eval_map(
    pred: &Path,
    gt: Option<&Path>,
    manifest: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let dets = CocoDocument::load(pred)?.detections();
    let gts = match (gt, manifest) {
        (Some(g), _) => CocoDocument::load(g)?.ground_truths(),
        (None, Some(m)) => manifest_ground_truths(&load_manifest(m)?),
        (None, None) => {
            return Err(CliError::Usage(
                "either --gt or --manifest is required".into(),
            ))
        }
    };
    if gts.is_empty() {
        return Err(CliError::Usage(
            "no ground-truth boxes to evaluate against".into(),
        ));
    }
    let r = mean_ap(&dets, &gts);
    emit(
        &MetricReport {
            metric: "map",
            value: r.map50,
            map5095: Some(r.map5095),
            per_class: r
                .per_class
                .into_iter()
                .map(|(c, ap)| (c, json!(ap)))
                .collect(),
        },
        out,
    )
}

pub fn sweep(
    manifest: &Path,
    scoring: &ScoringConfig,
    cfg: &ThresholdConfig,
    deltas: &[f64],
    threads: usize,
    out: Option<&Path>,
) -> Result<()> {
    if let Some(d) = deltas.iter().find(|d| !d.is_finite()) {
        return Err(CliError::Usage(format!("invalid delta {d}")));
    }
    let m = load_manifest(manifest)?;
    let rows = sweep_delta(&m, cfg, scoring, deltas, threads)?;
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_text(&dir.join("sweep.json"), &pretty(&rows))?;
            let mut csv = String::from("delta,mean_iou,images\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.delta, r.mean_iou, r.images));
            }
            write_text(&dir.join("sweep.csv"), &csv)
        }
        None => emit(&rows, None),
    }
}

pub fn synth(spec: &SynthSpec, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    let m = synth::generate(spec, out)?;
    let defects: usize = m
        .images
        .iter()
        .map(|i| i.gt_boxes.as_ref().map_or(0, Vec::len))
        .sum();
    log::info!(
        "wrote {} images with {defects} planted defects to {}",
        m.images.len(),
        out.display()
    );
    Ok(out.join("manifest.json"))
}
