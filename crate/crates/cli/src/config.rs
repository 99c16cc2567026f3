//! `agssp.toml` settings and their merge with command-line flags.
//!
//! Every key is optional:
//!
//! ```toml
//! threads = 4
//!
//! [scoring]
//! tau = 0.07
//! fusion_layers = [0, 1, 2, 3]
//! few_shot_layer = "all"      # or "final"
//! clip_map = false
//!
//! [boxes]
//! delta = 0.1
//! min_area = 4
//! top_k = 10
//! nms_iou = 0.5
//! classify_threshold = 0.5
//! connectivity = 8            # or 4
//! box_score = "max"           # or "mean"
//! order = "topk-then-nms"     # or "nms-then-topk"
//!
//! [distill]
//! norm = "l2"                 # or "none"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use agssp_core::distill::Normalization;
use agssp_core::kead::{BankLayers, ScoringConfig};
use agssp_core::pseudolabel::{BoxScore, Connectivity, PruneOrder, ThresholdConfig};
use clap::ValueEnum;
use serde::Deserialize;

use crate::error::CliError;

pub const DEFAULT_CONFIG: &str = "agssp.toml";
pub const THREADS_ENV: &str = "AGSSP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FewShotLayer {
    All,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BoxScoreArg {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OrderArg {
    TopkThenNms,
    NmsThenTopk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DistillNorm {
    None,
    L2,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub threads: Option<usize>,
    #[serde(default)]
    pub scoring: ScoringSection,
    #[serde(default)]
    pub boxes: BoxesSection,
    #[serde(default)]
    pub distill: DistillSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    pub tau: Option<f64>,
    pub fusion_layers: Option<Vec<usize>>,
    pub few_shot_layer: Option<FewShotLayer>,
    pub clip_map: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxesSection {
    pub delta: Option<f64>,
    pub min_area: Option<usize>,
    pub top_k: Option<usize>,
    pub nms_iou: Option<f64>,
    pub classify_threshold: Option<f64>,
    pub connectivity: Option<u8>,
    pub box_score: Option<BoxScoreArg>,
    pub order: Option<OrderArg>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub norm: Option<DistillNorm>,
}

impl FileConfig {
    /// Reads `explicit` if given, else `agssp.toml` in the working directory
    /// if present, else an empty config.
    pub fn locate(explicit: Option<&Path>) -> Result<Self, CliError> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let p = PathBuf::from(DEFAULT_CONFIG);
                if !p.is_file() {
                    return Ok(Self::default());
                }
                p
            }
        };
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Io(format!("reading {}", path.display()), e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Scoring flags shared by every command that may compute maps.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct ScoringArgs {
    /// Softmax temperature of the score function.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Comma-separated token layers (0-3) averaged into the zero-shot map.
    #[arg(long, value_delimiter = ',')]
    pub fusion_layers: Option<Vec<usize>>,
    /// Layers that feed the few-shot memory bank.
    #[arg(long, value_enum)]
    pub few_shot_layer: Option<FewShotLayer>,
    /// Clamp the combined zero- and few-shot map to [0, 1].
    #[arg(long)]
    pub clip_map: bool,
}

impl ScoringArgs {
    pub fn resolve(&self, file: &ScoringSection) -> ScoringConfig {
        let mut cfg = ScoringConfig::default();
        if let Some(t) = self.tau.or(file.tau) {
            cfg.tau = t;
        }
        if let Some(l) = self
            .fusion_layers
            .clone()
            .or_else(|| file.fusion_layers.clone())
        {
            cfg.fusion_layers = l;
        }
        if let Some(l) = self.few_shot_layer.or(file.few_shot_layer) {
            cfg.bank_layers = match l {
                FewShotLayer::All => BankLayers::All,
                FewShotLayer::Final => BankLayers::Final,
            };
        }
        cfg.clip_map = self.clip_map || file.clip_map.unwrap_or(false);
        cfg
    }
}

/// Thresholding and pruning flags.
#[derive(Debug, Default, Clone, clap::Args)]
pub struct BoxArgs {
    /// Offset subtracted from the category's mean map maximum.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Smallest component area (pixels) that yields a box.
    #[arg(long)]
    pub min_area: Option<usize>,
    /// Boxes kept per image.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Suppress boxes overlapping a kept box above this IoU.
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Images with an image-level score below this are normal.
    #[arg(long)]
    pub classify_threshold: Option<f64>,
    /// Pixel connectivity, 4 or 8.
    #[arg(long)]
    pub connectivity: Option<u8>,
    #[arg(long, value_enum)]
    pub box_score: Option<BoxScoreArg>,
    /// Order of the top-k and NMS pruning stages.
    #[arg(long, value_enum)]
    pub order: Option<OrderArg>,
}

impl BoxArgs {
    pub fn resolve(&self, file: &BoxesSection) -> Result<ThresholdConfig, CliError> {
        let d = ThresholdConfig::default();
        let connectivity = match self.connectivity.or(file.connectivity) {
            None => d.connectivity,
            Some(4) => Connectivity::Four,
            Some(8) => Connectivity::Eight,
            Some(n) => {
                return Err(CliError::Usage(format!(
                    "connectivity must be 4 or 8, got {n}"
                )))
            }
        };
        let cfg = ThresholdConfig {
            delta: self.delta.or(file.delta).unwrap_or(d.delta),
            min_component_area: self
                .min_area
                .or(file.min_area)
                .unwrap_or(d.min_component_area),
            top_k: self.top_k.or(file.top_k).unwrap_or(d.top_k),
            nms_iou: self.nms_iou.or(file.nms_iou).unwrap_or(d.nms_iou),
            classify_threshold: self
                .classify_threshold
                .or(file.classify_threshold)
                .unwrap_or(d.classify_threshold),
            connectivity,
            box_score: match self.box_score.or(file.box_score) {
                None => d.box_score,
                Some(BoxScoreArg::Max) => BoxScore::Max,
                Some(BoxScoreArg::Mean) => BoxScore::Mean,
            },
            order: match self.order.or(file.order) {
                None => d.order,
                Some(OrderArg::TopkThenNms) => PruneOrder::TopKThenNms,
                Some(OrderArg::NmsThenTopk) => PruneOrder::NmsThenTopK,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn distill_norm(flag: Option<DistillNorm>, file: &DistillSection) -> Normalization {
    match flag.or(file.norm) {
        Some(DistillNorm::None) => Normalization::None,
        Some(DistillNorm::L2) | None => Normalization::L2Flatten,
    }
}

/// Worker count: flag, then config, then all cores; capped by
/// `AGSSP_THREADS` when set.
pub fn threads(flag: Option<usize>, file: &FileConfig) -> Result<usize, CliError> {
    let requested = flag
        .or(file.threads)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "{THREADS_ENV} must be a positive integer, got {v:?}"
                    ))
                })?,
        ),
        Err(_) => None,
    };
    if requested == 0 {
        return Err(CliError::Usage("threads must be at least 1".into()));
    }
    Ok(cap.map_or(requested, |c| requested.min(c)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file: FileConfig = toml::from_str(
            "[scoring]\ntau = 0.5\nclip_map = true\n[boxes]\ndelta = 0.2\ntop_k = 3",
        )
        .unwrap();
        let scoring = ScoringArgs {
            tau: Some(0.1),
            ..Default::default()
        }
        .resolve(&file.scoring);
        assert_eq!(scoring.tau, 0.1);
        assert!(scoring.clip_map);
        let boxes = BoxArgs {
            top_k: Some(7),
            ..Default::default()
        }
        .resolve(&file.boxes)
        .unwrap();
        assert_eq!((boxes.delta, boxes.top_k), (0.2, 7));
        assert_eq!(boxes.nms_iou, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[boxes]\ndelat = 0.2").is_err());
    }

    #[test]
    fn bad_values_fail_validation() {
        let file = BoxesSection {
            connectivity: Some(6),
            ..Default::default()
        };
        assert!(BoxArgs::default().resolve(&file).is_err());
        let file = BoxesSection {
            delta: Some(1.5),
            ..Default::default()
        };
        assert!(BoxArgs::default().resolve(&file).is_err());
    }
}
