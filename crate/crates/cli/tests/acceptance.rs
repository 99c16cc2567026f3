//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use agssp_core::coco::CocoDocument;
use agssp_core::distill::{
    compute_lambda, distill_loss, feature_gradient, total_loss, LossKind, Normalization,
};
use agssp_core::kead::{
    few_shot_patch_scores, score_function, BankLayers, MemoryBank, PatchTokenSet,
};
use agssp_core::metrics::{
    auroc, average_precision, manifest_ground_truths, mean_ap, Detection, GroundTruth,
};
use agssp_core::pseudolabel::{connected_components, label_components, nms, Connectivity};
use agssp_core::synth::{cases, oracle, SynthRng};
use agssp_core::tensorio::ImageLabel;
use agssp_core::{DatasetManifest, Tensor};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Outcome {
    check(
        elapsed < limit,
        format!(
            "{detail}; {:.3}s (limit {}s)",
            elapsed.as_secs_f64(),
            limit.as_secs()
        ),
    )
}

fn unit_vec(rng: &mut SynthRng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn score_symmetry() -> Outcome {
    let start = Instant::now();
    let mut rng = SynthRng::new(1001);
    let (mut worst_equal, mut worst_swap) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let d = 2 + i % 63;
        let f = unit_vec(&mut rng, d);
        let tp = unit_vec(&mut rng, d);
        // Mirror t⁺ through f: equal cosine to f by construction.
        let dot: f64 = f.iter().zip(&tp).map(|(a, b)| a * b).sum();
        let mirrored: Vec<f64> = f.iter().zip(&tp).map(|(a, b)| 2.0 * dot * a - b).collect();
        let tn = unit_vec(&mut rng, d);
        let scale = rng.range(0.1, 10.0);
        let fs: Vec<f64> = f.iter().map(|v| v * scale).collect();
        for tau in [0.07, 0.5] {
            let same = score_function(&fs, &tp, &tp, tau).map_err(|e| e.to_string())?;
            let mirror = score_function(&fs, &tp, &mirrored, tau).map_err(|e| e.to_string())?;
            worst_equal = worst_equal
                .max((same - 0.5).abs())
                .max((mirror - 0.5).abs());
            let a = score_function(&fs, &tp, &tn, tau).map_err(|e| e.to_string())?;
            let b = score_function(&fs, &tn, &tp, tau).map_err(|e| e.to_string())?;
            worst_swap = worst_swap.max((a + b - 1.0).abs());
        }
    }
    let detail =
        format!("max |s-0.5| {worst_equal:.2e}, max |s+s'-1| {worst_swap:.2e} over 1000 vectors");
    check(worst_equal <= 1e-12 && worst_swap <= 1e-12, detail.clone())
        .and_then(|d| within(start.elapsed(), Duration::from_secs(1), d))
}

fn few_shot_identity() -> Outcome {
    let mut rng = SynthRng::new(1002);
    let (m, d) = (9, 8);
    let refs: Vec<PatchTokenSet> = (0..4)
        .map(|_| {
            let data: Vec<f32> = (0..4 * m * d).map(|_| rng.normal() as f32).collect();
            let cls: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
            PatchTokenSet::new(
                Tensor::new(vec![4, m, d], data).unwrap(),
                Tensor::new(vec![d], cls).unwrap(),
                None,
            )
            .unwrap()
        })
        .collect();
    let bank = MemoryBank::new(&refs, BankLayers::All).map_err(|e| e.to_string())?;
    let mut worst_identity = 0.0f32;
    for r in &refs {
        for slot in 0..4 {
            let s = few_shot_patch_scores(r, &bank, slot).map_err(|e| e.to_string())?;
            worst_identity = worst_identity.max(s.values.iter().fold(0.0, |a, &b| a.max(b.abs())));
        }
    }

    // One reference whose every token is e0, probed with e1.
    let mut basis = vec![0.0f32; 4 * m * d];
    basis.iter_mut().step_by(d).for_each(|v| *v = 1.0);
    let cls = Tensor::new(vec![d], vec![1.0; d]).unwrap();
    let single = PatchTokenSet::new(
        Tensor::new(vec![4, m, d], basis).unwrap(),
        cls.clone(),
        None,
    )
    .unwrap();
    let ortho_bank = MemoryBank::new(&[single], BankLayers::Final).map_err(|e| e.to_string())?;
    let mut probe = vec![0.0f32; 4 * m * d];
    probe.iter_mut().skip(1).step_by(d).for_each(|v| *v = 1.0);
    let probe = PatchTokenSet::new(Tensor::new(vec![4, m, d], probe).unwrap(), cls, None).unwrap();
    let ortho = few_shot_patch_scores(&probe, &ortho_bank, 0).map_err(|e| e.to_string())?;
    let worst_ortho = ortho
        .values
        .iter()
        .fold(0.0f64, |a, &b| a.max((b as f64 - 0.5).abs()));
    check(
        worst_identity == 0.0 && worst_ortho <= 1e-7,
        format!(
            "bank members max score {worst_identity}, orthogonal max |s-0.5| {worst_ortho:.2e}"
        ),
    )
}

fn components() -> Outcome {
    let start = Instant::now();
    let mut rng = SynthRng::new(1003);
    let mut compared = 0;
    for i in 0..200 {
        let density = rng.range(0.05, 0.8);
        let (mask, map) = cases::mask_and_map(&mut rng, 32, 32, density);
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let (labels, count) = label_components(&mask, conn);
            let (want, want_count) = oracle::flood_fill(&mask, eight);
            if labels != want || count != want_count {
                return Err(format!("mask {i} {conn:?}: labels differ"));
            }
            let got = connected_components(&mask, &map, conn).map_err(|e| e.to_string())?;
            let stats = oracle::component_stats(&want, want_count, 32, &map.values);
            let same = got.len() == stats.len()
                && got.iter().zip(&stats).all(|(g, s)| {
                    g.area == s.area
                        && (g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h) == s.bbox
                        && g.max_anomaly == s.max
                });
            if !same {
                return Err(format!("mask {i} {conn:?}: component stats differ"));
            }
            compared += count;
        }
    }
    within(
        start.elapsed(),
        Duration::from_secs(5),
        format!("200 masks x 2 connectivities, {compared} components identical"),
    )
}

fn nms_oracle() -> Outcome {
    let mut rng = SynthRng::new(1004);
    let mut kept = 0;
    for i in 0..100 {
        let boxes = cases::boxes(&mut rng, 50);
        let got = nms(&boxes, 0.5);
        if got != oracle::nms(&boxes, 0.5) {
            return Err(format!("set {i} differs"));
        }
        kept += got.len();
    }
    Ok(format!("100 sets identical, {kept} boxes kept"))
}

fn auroc_oracle() -> Outcome {
    let mut rng = SynthRng::new(1005);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let s = cases::samples(&mut rng, 500, i % 2 == 0);
        let got = auroc(&s).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle::auroc(&s)).abs());
    }
    check(
        worst <= 1e-9,
        format!("max deviation {worst:.2e} over 100 samples (50 heavy-tie)"),
    )
}

fn map_machinery() -> Outcome {
    let gt = |x: f64, y: f64| GroundTruth {
        image_id: 1,
        bbox: [x, y, 10.0, 10.0],
        class_id: 1,
    };
    let det = |x: f64, y: f64, score: f64| Detection {
        image_id: 1,
        bbox: [x, y, 10.0, 10.0],
        class_id: 1,
        score,
    };
    let gts = [gt(0.0, 0.0), gt(20.0, 20.0)];
    let dets = [
        det(0.0, 0.0, 0.9),
        det(50.0, 50.0, 0.8),
        det(21.0, 21.0, 0.7),
    ];
    let expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
    let worked = average_precision(&dets, &gts, 0.5);
    let (oracle_ap, _) = oracle::pr(&dets, &gts, 0.5);
    if (worked.ap - expected).abs() > 1e-9 || (oracle_ap - expected).abs() > 1e-9 {
        return Err(format!(
            "worked fixture AP {} / oracle {oracle_ap}, expected {expected}",
            worked.ap
        ));
    }

    let mut rng = SynthRng::new(1006);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (dets, gts) = cases::detection_instance(&mut rng);
        for t in [0.5, 0.75] {
            worst = worst
                .max((average_precision(&dets, &gts, t).ap - oracle::pr(&dets, &gts, t).0).abs());
        }
    }

    let perfect: Vec<Detection> = gts
        .iter()
        .map(|g| Detection {
            image_id: g.image_id,
            bbox: g.bbox,
            class_id: g.class_id,
            score: 1.0,
        })
        .collect();
    let p = mean_ap(&perfect, &gts);
    check(
        worst <= 1e-9 && p.map50 == 1.0 && p.map5095 == 1.0,
        format!(
            "worked AP {:.6}, random max deviation {worst:.2e}, perfect mAP {}/{}",
            worked.ap, p.map50, p.map5095
        ),
    )
}

fn distill_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = SynthRng::new(1007);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let layers = cases::feature_batch(&mut rng);
        for (kind, norm) in [
            (LossKind::L2, Normalization::None),
            (LossKind::L2, Normalization::L2Flatten),
            (LossKind::Cosine, Normalization::L2Flatten),
        ] {
            let loss = |ls: &[(agssp_core::distill::FeatureMap, agssp_core::distill::Grid)]| {
                distill_loss(&cases::distill_batch(ls, norm), kind)
                    .unwrap()
                    .loss
            };
            let lg = distill_loss(&cases::distill_batch(&layers, norm), kind)
                .map_err(|e| e.to_string())?;
            for l in 0..layers.len() {
                let analytic = feature_gradient(&layers[l].0, &lg.grads[l]);
                for (i, g) in analytic.iter().enumerate() {
                    let at = |k: f64| {
                        let mut shifted = layers.clone();
                        shifted[l].0.values[i] += k * h;
                        loss(&shifted)
                    };
                    // Five-point central stencil.
                    let fd = (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * h);
                    worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-6));
                }
            }
        }
    }
    check(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 50 batches, L2 (both norms) and cosine"),
    )
    .and_then(|d| within(start.elapsed(), Duration::from_secs(10), d))
}

fn lambda_rule() -> Outcome {
    let mut cases = Vec::new();
    for a in -6..=6 {
        for b in -6..=6 {
            cases.push((2f64.powi(a), 2f64.powi(b)));
        }
    }
    for &(ld, lt) in &cases {
        let lambda = compute_lambda(ld, lt).map_err(|e| e.to_string())?.lambda;
        let total = total_loss(ld, lt, lambda);
        if total != 2.0 * ld {
            return Err(format!("l_d={ld}, l_t={lt}: total {total} != {}", 2.0 * ld));
        }
    }
    Ok(format!("{} power-of-two pairs exact", cases.len()))
}

fn agssp(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_agssp"))
        .args(args)
        .current_dir(dir)
        .env_remove("AGSSP_THREADS")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn end_to_end(dir: &Path) -> Outcome {
    let start = Instant::now();
    agssp(
        dir,
        &[
            "--threads",
            "1",
            "synth",
            "--seed",
            "42",
            "--n",
            "200",
            "--out",
            "ds",
        ],
    )?;
    agssp(
        dir,
        &[
            "--threads",
            "1",
            "score",
            "--manifest",
            "ds/manifest.json",
            "--out",
            "scored",
        ],
    )?;
    agssp(
        dir,
        &[
            "--threads",
            "1",
            "boxes",
            "--manifest",
            "scored/manifest.json",
            "--delta",
            "0.1",
            "--out",
            "pseudo.json",
        ],
    )?;
    let elapsed = start.elapsed();

    let manifest =
        DatasetManifest::load(dir.join("ds/manifest.json")).map_err(|e| e.to_string())?;
    let doc = CocoDocument::load(dir.join("pseudo.json")).map_err(|e| e.to_string())?;
    let gts = manifest_ground_truths(&manifest);
    let curve = average_precision(&doc.detections(), &gts, 0.5);
    let recall = curve.points.last().map_or(0.0, |p| p.0);
    let normal: Vec<u64> = manifest
        .images
        .iter()
        .filter(|i| i.label == ImageLabel::Normal)
        .map(|i| i.image_id)
        .collect();
    let fp = doc
        .annotations
        .iter()
        .filter(|a| normal.contains(&a.image_id))
        .count();
    let fp_rate = if doc.annotations.is_empty() {
        0.0
    } else {
        fp as f64 / doc.annotations.len() as f64
    };
    check(
        recall >= 0.9 && fp_rate <= 0.05,
        format!(
            "recovered {:.1}% of {} defects at IoU>=0.5, {fp} of {} boxes on {} defect-free images",
            100.0 * recall,
            gts.len(),
            doc.annotations.len(),
            normal.len()
        ),
    )
    .and_then(|d| within(elapsed, Duration::from_secs(60), d))
}

fn delta_sweep(dir: &Path) -> Outcome {
    agssp(
        dir,
        &[
            "sweep-delta",
            "--manifest",
            "ds/manifest.json",
            "--deltas",
            "0,0.1,0.2,0.3,0.4,0.5",
            "--out",
            "sweep",
        ],
    )?;
    let rows: Vec<serde_json::Value> = serde_json::from_str(
        &fs::read_to_string(dir.join("sweep/sweep.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let iou = |d: f64| {
        rows.iter()
            .find(|r| r["delta"].as_f64() == Some(d))
            .and_then(|r| r["mean_iou"].as_f64())
            .unwrap_or(f64::NAN)
    };
    let (a, b) = (iou(0.1), iou(0.4));
    check(
        a > b,
        format!("mean mask IoU {a:.4} at delta 0.1 vs {b:.4} at delta 0.4"),
    )
}

fn determinism(dir: &Path) -> Outcome {
    agssp(
        dir,
        &[
            "--threads",
            "1",
            "boxes",
            "--manifest",
            "ds/manifest.json",
            "--out",
            "one.json",
        ],
    )?;
    agssp(
        dir,
        &[
            "--threads",
            "8",
            "boxes",
            "--manifest",
            "ds/manifest.json",
            "--out",
            "eight.json",
        ],
    )?;
    let a = fs::read(dir.join("one.json")).map_err(|e| e.to_string())?;
    let b = fs::read(dir.join("eight.json")).map_err(|e| e.to_string())?;
    check(
        a == b,
        format!(
            "{} bytes, 1 vs 8 workers {}",
            a.len(),
            if a == b { "identical" } else { "differ" }
        ),
    )
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let dir = work.path();
    let criteria: Vec<Criterion> = vec![
        ("score function symmetry", Box::new(score_symmetry)),
        ("few-shot identity", Box::new(few_shot_identity)),
        ("connected components vs flood fill", Box::new(components)),
        ("nms vs quadratic oracle", Box::new(nms_oracle)),
        ("auroc vs pair counting", Box::new(auroc_oracle)),
        ("map machinery", Box::new(map_machinery)),
        ("distillation gradients", Box::new(distill_gradients)),
        ("lambda balance", Box::new(lambda_rule)),
        (
            "end-to-end synthetic recovery",
            Box::new(move || end_to_end(dir)),
        ),
        ("delta sweep ordering", Box::new(move || delta_sweep(dir))),
        (
            "boxes determinism across workers",
            Box::new(move || determinism(dir)),
        ),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
