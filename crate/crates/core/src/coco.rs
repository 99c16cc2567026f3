//! COCO annotation documents (the subset used for pseudo-labels and metrics).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Detection, GroundTruth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in absolute pixels, top-left origin.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoDocument {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Invalid(format!("{}: not a COCO document: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("COCO document always serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Annotations as scored detections; a missing score counts as 1.
    pub fn detections(&self) -> Vec<Detection> {
        self.annotations
            .iter()
            .map(|a| Detection {
                image_id: a.image_id,
                bbox: a.bbox,
                class_id: a.category_id,
                score: a.score.unwrap_or(1.0),
            })
            .collect()
    }

    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.annotations
            .iter()
            .map(|a| GroundTruth {
                image_id: a.image_id,
                bbox: a.bbox,
                class_id: a.category_id,
            })
            .collect()
    }
}
