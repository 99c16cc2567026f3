use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const MANIFEST_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("schema violation at {field}: {message}")]
    SchemaViolation { field: String, message: String },
    #[error("dangling reference at {field}: {message}")]
    DanglingReference { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn schema(field: impl Into<String>, message: impl Into<String>) -> ManifestError {
    ManifestError::SchemaViolation {
        field: field.into(),
        message: message.into(),
    }
}

fn dangling(field: impl Into<String>, message: impl Into<String>) -> ManifestError {
    ManifestError::DanglingReference {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    pub object: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbeddingPaths {
    pub normal: String,
    pub anomaly: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageLabel {
    Normal,
    Defect,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_tokens: Option<String>,
    /// Patch grid `[rows, cols]`; a square grid is assumed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_grid: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_map: Option<String>,
    /// Precomputed image-level score.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub as_x: Option<f64>,
    /// Ground-truth boxes as `[x, y, w, h, class_id]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_boxes: Option<Vec<[f64; 5]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<String>,
    #[serde(default)]
    pub label: ImageLabel,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ImageRecord {
    pub fn new(image_id: u64, category_id: u64, width: usize, height: usize) -> Self {
        Self {
            image_id,
            category_id,
            width,
            height,
            file_name: None,
            patch_tokens: None,
            token_grid: None,
            cls_token: None,
            anomaly_map: None,
            as_x: None,
            gt_boxes: None,
            gt_mask: None,
            label: ImageLabel::Unknown,
            extra: Map::new(),
        }
    }

    /// COCO `file_name`, falling back to the image id.
    pub fn display_name(&self) -> String {
        self.file_name
            .clone()
            .unwrap_or_else(|| self.image_id.to_string())
    }

    fn paths(&self) -> impl Iterator<Item = (&'static str, &String)> {
        [
            ("patch_tokens", &self.patch_tokens),
            ("cls_token", &self.cls_token),
            ("anomaly_map", &self.anomaly_map),
            ("gt_mask", &self.gt_mask),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|p| (k, p)))
    }
}

/// JSON catalogue binding categories, images, embeddings, maps and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub categories: Vec<Category>,
    /// Keyed by category id rendered as a string.
    #[serde(default)]
    pub text_embeddings: BTreeMap<String, TextEmbeddingPaths>,
    #[serde(default)]
    pub images: Vec<ImageRecord>,
    /// Normal reference images per category (string id) for few-shot banks.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub few_shot_refs: BTreeMap<String, Vec<u64>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(categories: Vec<Category>) -> Self {
        Self {
            version: MANIFEST_VERSION.to_string(),
            categories,
            text_embeddings: BTreeMap::new(),
            images: Vec::new(),
            few_shot_refs: BTreeMap::new(),
            extra: Map::new(),
            base_dir: PathBuf::new(),
        }
    }

    /// Loads and eagerly validates a manifest, including the existence of
    /// every referenced file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut manifest = Self::from_json(&text)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.check_files()?;
        Ok(manifest)
    }

    /// Parses and validates the document structure without touching the
    /// filesystem.
    pub fn from_json(text: &str) -> Result<Self, ManifestError> {
        let manifest: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".into());
            schema(field, msg)
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest always serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ManifestError> {
        self.validate()?;
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Directory the relative paths resolve against.
    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn category(&self, id: u64) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.image_id == id)
    }

    pub fn text_embeddings_for(&self, category_id: u64) -> Option<&TextEmbeddingPaths> {
        self.text_embeddings.get(&category_id.to_string())
    }

    pub fn few_shot_refs_for(&self, category_id: u64) -> &[u64] {
        self.few_shot_refs
            .get(&category_id.to_string())
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Structural and referential checks that need no filesystem access.
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.version != MANIFEST_VERSION {
            return Err(schema(
                "version",
                format!("expected \"{MANIFEST_VERSION}\", found {:?}", self.version),
            ));
        }
        let mut category_ids = HashSet::new();
        for (i, c) in self.categories.iter().enumerate() {
            if c.id < 1 {
                return Err(schema(format!("categories[{i}].id"), "ids start at 1"));
            }
            if !category_ids.insert(c.id) {
                return Err(schema(
                    format!("categories[{i}].id"),
                    format!("duplicate category id {}", c.id),
                ));
            }
        }

        for (key, paths) in &self.text_embeddings {
            let field = format!("text_embeddings.{key}");
            let id: u64 = key
                .parse()
                .map_err(|_| schema(&field, "key must be a category id"))?;
            if !category_ids.contains(&id) {
                return Err(dangling(&field, format!("no category with id {id}")));
            }
            check_relative(&format!("{field}.normal"), &paths.normal)?;
            check_relative(&format!("{field}.anomaly"), &paths.anomaly)?;
        }

        let mut image_ids = HashSet::new();
        for (i, img) in self.images.iter().enumerate() {
            if !image_ids.insert(img.image_id) {
                return Err(schema(
                    format!("images[{i}].image_id"),
                    format!("duplicate image id {}", img.image_id),
                ));
            }
            if !category_ids.contains(&img.category_id) {
                return Err(dangling(
                    format!("images[{i}].category_id"),
                    format!("no category with id {}", img.category_id),
                ));
            }
            for (key, p) in img.paths() {
                check_relative(&format!("images[{i}].{key}"), p)?;
            }
            for (b, bx) in img.gt_boxes.iter().flatten().enumerate() {
                if !(bx[2] > 0.0 && bx[3] > 0.0) {
                    return Err(schema(
                        format!("images[{i}].gt_boxes[{b}]"),
                        "width and height must be positive",
                    ));
                }
            }
            if let Some([r, c]) = img.token_grid {
                if r == 0 || c == 0 {
                    return Err(schema(format!("images[{i}].token_grid"), "empty grid"));
                }
            }
        }

        for (key, refs) in &self.few_shot_refs {
            let field = format!("few_shot_refs.{key}");
            let id: u64 = key
                .parse()
                .map_err(|_| schema(&field, "key must be a category id"))?;
            if !category_ids.contains(&id) {
                return Err(dangling(&field, format!("no category with id {id}")));
            }
            for r in refs {
                if !image_ids.contains(r) {
                    return Err(dangling(&field, format!("no image with id {r}")));
                }
            }
        }
        Ok(())
    }

    fn check_files(&self) -> Result<(), ManifestError> {
        let check = |field: String, rel: &str| {
            if self.resolve(rel).is_file() {
                Ok(())
            } else {
                Err(dangling(field, format!("file {rel:?} does not exist")))
            }
        };
        for (key, paths) in &self.text_embeddings {
            check(format!("text_embeddings.{key}.normal"), &paths.normal)?;
            check(format!("text_embeddings.{key}.anomaly"), &paths.anomaly)?;
        }
        for (i, img) in self.images.iter().enumerate() {
            for (key, p) in img.paths() {
                check(format!("images[{i}].{key}"), p)?;
            }
        }
        Ok(())
    }
}

fn check_relative(field: &str, p: &str) -> Result<(), ManifestError> {
    let path = Path::new(p);
    if p.is_empty() || path.is_absolute() || path.has_root() {
        return Err(schema(field, format!("{p:?} must be a relative path")));
    }
    if path.components().any(|c| matches!(c, Component::Prefix(_))) {
        return Err(schema(field, format!("{p:?} must be a relative path")));
    }
    Ok(())
}
