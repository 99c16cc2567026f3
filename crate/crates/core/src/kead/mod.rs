//! Knowledge-enhanced anomaly scoring.
//!
//! Image-level scores compare the global (CLS) token against averaged normal
//! and anomalous text tokens through a temperature softmax. Pixel-level maps
//! apply the same score to each patch token of four encoder layers, upsample
//! each layer grid bilinearly to image resolution and average them. The
//! optional few-shot map scores each patch by its cosine distance to the
//! nearest token in a memory bank of normal reference patches.

mod resize;

pub use resize::bilinear_resize;

use thiserror::Error;

use crate::map::AnomalyMap;
use crate::tensorio::Tensor;

/// Number of encoder layers a [`PatchTokenSet`] carries.
pub const TOKEN_LAYERS: usize = 4;
pub const DEFAULT_TAU: f64 = 0.07;
/// Tolerance on the unit norm of stored text embeddings.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;
const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum KeadError {
    #[error("prompt field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("mean text token has (near) zero norm; cannot renormalize")]
    DegenerateMean,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("map sizes differ: {left:?} vs {right:?}")]
    SizeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("anomaly map is empty")]
    EmptyMap,
    #[error("invalid tokens: {0}")]
    InvalidTokens(String),
    #[error("invalid scoring config: {0}")]
    InvalidConfig(String),
}

type Result<T> = std::result::Result<T, KeadError>;

/// Fields substituted into the anomaly prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub object: String,
    pub defect_type: String,
    pub defect_features: String,
}

pub fn build_prompt(spec: &PromptSpec) -> Result<String> {
    for (name, value) in [
        ("object", &spec.object),
        ("defect_type", &spec.defect_type),
        ("defect_features", &spec.defect_features),
    ] {
        if value.trim().is_empty() {
            return Err(KeadError::EmptyField(name));
        }
    }
    Ok(format!(
        "A photo of {} with {} defect, it appears as {}.",
        spec.object, spec.defect_type, spec.defect_features
    ))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(KeadError::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn unit(v: &[f32]) -> Option<Vec<f64>> {
    let v = to_f64(v);
    let n = norm(&v);
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

/// Mean of the rows of an `n × dim` matrix, renormalized to unit length.
pub fn average_text_tokens(rows: &[f32], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || rows.is_empty() || !rows.len().is_multiple_of(dim) {
        return Err(KeadError::InvalidTokens(format!(
            "{} values do not form rows of width {dim}",
            rows.len()
        )));
    }
    let n = rows.len() / dim;
    let mut mean = vec![0.0f64; dim];
    for row in rows.chunks_exact(dim) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let len = norm(&mean);
    if len < DEGENERATE_NORM {
        return Err(KeadError::DegenerateMean);
    }
    Ok(mean.into_iter().map(|m| m / len).collect())
}

/// Probability that `feature` is anomalous: a two-way softmax over its
/// cosine similarities to the normal and anomalous text tokens divided by
/// the temperature `tau`.
pub fn score_function(feature: &[f64], normal: &[f64], anomaly: &[f64], tau: f64) -> Result<f64> {
    if feature.len() != normal.len() || feature.len() != anomaly.len() {
        return Err(KeadError::DimensionMismatch {
            expected: feature.len(),
            found: if normal.len() != feature.len() {
                normal.len()
            } else {
                anomaly.len()
            },
        });
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(KeadError::InvalidConfig(format!(
            "tau must be > 0, got {tau}"
        )));
    }
    let pos = cosine(feature, normal)? / tau;
    let neg = cosine(feature, anomaly)? / tau;
    let top = pos.max(neg);
    let (ep, en) = ((pos - top).exp(), (neg - top).exp());
    Ok(en / (ep + en))
}

/// Normal (`N⁺ × d`) and anomalous (`N⁻ × d`) prompt embeddings of one category.
#[derive(Debug, Clone)]
pub struct TextEmbeddingSet {
    pub category_id: u64,
    dim: usize,
    normal: Vec<f32>,
    anomaly: Vec<f32>,
}

impl TextEmbeddingSet {
    pub fn new(category_id: u64, normal: Tensor, anomaly: Tensor) -> Result<Self> {
        let dim = match (normal.shape(), anomaly.shape()) {
            (&[np, d], &[na, d2]) if np >= 1 && na >= 1 && d >= 1 && d == d2 => d,
            (n, a) => {
                return Err(KeadError::InvalidTokens(format!(
                    "text embeddings must be (N>=1, d) with equal d, got {n:?} and {a:?}"
                )))
            }
        };
        for (which, t) in [("normal", &normal), ("anomaly", &anomaly)] {
            for (i, row) in t.data().chunks_exact(dim).enumerate() {
                let n = norm(&to_f64(row));
                if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(KeadError::InvalidTokens(format!(
                        "{which} row {i} has norm {n:.6}, expected unit norm"
                    )));
                }
            }
        }
        Ok(Self {
            category_id,
            dim,
            normal: normal.into_data(),
            anomaly: anomaly.into_data(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> Result<TextTokens> {
        Ok(TextTokens {
            normal: average_text_tokens(&self.normal, self.dim)?,
            anomaly: average_text_tokens(&self.anomaly, self.dim)?,
        })
    }
}

/// Averaged, unit-norm normal (`t⁺`) and anomalous (`t⁻`) text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTokens {
    pub normal: Vec<f64>,
    pub anomaly: Vec<f64>,
}

impl TextTokens {
    pub fn dim(&self) -> usize {
        self.normal.len()
    }
}

/// Dense patch tokens of four encoder layers plus the global token.
#[derive(Debug, Clone)]
pub struct PatchTokenSet {
    rows: usize,
    cols: usize,
    dim: usize,
    tokens: Vec<f32>,
    cls: Vec<f32>,
}

impl PatchTokenSet {
    /// `tokens` has shape `(4, m, d)`, `cls` shape `(d,)`. Without an explicit
    /// grid, `m` must be a perfect square.
    pub fn new(tokens: Tensor, cls: Tensor, grid: Option<(usize, usize)>) -> Result<Self> {
        let (m, dim) = match *tokens.shape() {
            [TOKEN_LAYERS, m, d] if m >= 1 && d >= 1 => (m, d),
            ref s => {
                return Err(KeadError::InvalidTokens(format!(
                    "patch tokens must have shape ({TOKEN_LAYERS}, m, d), got {s:?}"
                )))
            }
        };
        if cls.shape() != [dim] {
            return Err(KeadError::DimensionMismatch {
                expected: dim,
                found: cls.len(),
            });
        }
        let (rows, cols) = match grid {
            Some(g) => g,
            None => {
                let side = (m as f64).sqrt().round() as usize;
                (side, side)
            }
        };
        if rows * cols != m {
            return Err(KeadError::InvalidTokens(format!(
                "grid {rows}x{cols} does not hold {m} patches"
            )));
        }
        Ok(Self {
            rows,
            cols,
            dim,
            tokens: tokens.into_data(),
            cls: cls.into_data(),
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cls(&self) -> &[f32] {
        &self.cls
    }

    pub fn token(&self, layer: usize, patch: usize) -> &[f32] {
        let start = (layer * self.patches() + patch) * self.dim;
        &self.tokens[start..start + self.dim]
    }

    fn layer(&self, layer: usize) -> impl Iterator<Item = &[f32]> {
        let m = self.patches();
        self.tokens[layer * m * self.dim..(layer + 1) * m * self.dim].chunks_exact(self.dim)
    }
}

/// Which layers the few-shot memory bank holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BankLayers {
    /// One bank per encoder layer; per-layer maps are averaged.
    #[default]
    All,
    /// A single bank of final-layer tokens.
    Final,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    pub tau: f64,
    /// Layers (0-based) averaged into the zero-shot map.
    pub fusion_layers: Vec<usize>,
    pub bank_layers: BankLayers,
    /// Clamp the combined zero + few-shot map back into `[0, 1]`.
    pub clip_map: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            fusion_layers: (0..TOKEN_LAYERS).collect(),
            bank_layers: BankLayers::All,
            clip_map: false,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(KeadError::InvalidConfig(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.fusion_layers.is_empty() || self.fusion_layers.iter().any(|&l| l >= TOKEN_LAYERS) {
            return Err(KeadError::InvalidConfig(format!(
                "fusion layers must be a non-empty subset of 0..{TOKEN_LAYERS}"
            )));
        }
        Ok(())
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(KeadError::DimensionMismatch { expected, found })
    }
}

/// Image-level anomaly score of the global token.
pub fn image_score(tokens: &PatchTokenSet, text: &TextTokens, cfg: &ScoringConfig) -> Result<f64> {
    check_dim(text.dim(), tokens.dim())?;
    score_function(&to_f64(tokens.cls()), &text.normal, &text.anomaly, cfg.tau)
}

/// Per-patch scores of one layer laid out on the token grid.
pub fn patch_scores(
    tokens: &PatchTokenSet,
    layer: usize,
    text: &TextTokens,
    tau: f64,
) -> Result<AnomalyMap> {
    check_dim(text.dim(), tokens.dim())?;
    let scores = tokens
        .layer(layer)
        .map(|a| score_function(&to_f64(a), &text.normal, &text.anomaly, tau).map(|s| s as f32))
        .collect::<Result<Vec<_>>>()?;
    let (rows, cols) = tokens.grid();
    Ok(AnomalyMap::new(rows, cols, scores))
}

fn fuse(maps: impl Iterator<Item = AnomalyMap>, height: usize, width: usize) -> AnomalyMap {
    let mut acc = vec![0.0f64; height * width];
    let mut n = 0usize;
    for m in maps {
        for (a, &v) in acc.iter_mut().zip(&m.values) {
            *a += v as f64;
        }
        n += 1;
    }
    AnomalyMap::new(
        height,
        width,
        acc.into_iter().map(|a| (a / n as f64) as f32).collect(),
    )
}

/// Zero-shot anomaly map at `(height, width)`: the mean of the upsampled
/// per-layer patch score grids.
pub fn zero_shot_map(
    tokens: &PatchTokenSet,
    text: &TextTokens,
    cfg: &ScoringConfig,
    height: usize,
    width: usize,
) -> Result<AnomalyMap> {
    cfg.validate()?;
    if height == 0 || width == 0 {
        return Err(KeadError::InvalidConfig(
            "output size must be at least 1x1".into(),
        ));
    }
    let layers = cfg
        .fusion_layers
        .iter()
        .map(|&l| {
            patch_scores(tokens, l, text, cfg.tau).map(|g| bilinear_resize(&g, height, width))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fuse(layers.into_iter(), height, width))
}

/// Reference patch tokens of `k` normal images, unit-normalized per row.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    layers: Vec<usize>,
    banks: Vec<Vec<f64>>,
    dim: usize,
    references: usize,
}

impl MemoryBank {
    pub fn new(references: &[PatchTokenSet], layers: BankLayers) -> Result<Self> {
        let first = references.first().ok_or(KeadError::EmptyBank)?;
        let dim = first.dim();
        let layer_ids: Vec<usize> = match layers {
            BankLayers::All => (0..TOKEN_LAYERS).collect(),
            BankLayers::Final => vec![TOKEN_LAYERS - 1],
        };
        let mut banks = vec![Vec::new(); layer_ids.len()];
        for r in references {
            check_dim(dim, r.dim())?;
            check_dim(first.patches(), r.patches())?;
            for (bank, &l) in banks.iter_mut().zip(&layer_ids) {
                for token in r.layer(l) {
                    bank.extend(unit(token).ok_or(KeadError::ZeroVector)?);
                }
            }
        }
        Ok(Self {
            layers: layer_ids,
            banks,
            dim,
            references: references.len(),
        })
    }

    pub fn references(&self) -> usize {
        self.references
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Encoder layers the bank holds, 0-based.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// `k·m` reference tokens per layer.
    pub fn rows(&self) -> usize {
        self.banks.first().map_or(0, |b| b.len() / self.dim)
    }
}

/// Distance of `token` to its nearest bank row, `min_r ½(1 − cos(a, r))`.
///
/// Evaluated as `¼‖â − r̂‖²` over unit vectors, which is algebraically the
/// same and is exactly zero when the token appears verbatim in the bank.
fn nearest_distance(token: &[f64], bank: &[f64], dim: usize) -> f64 {
    bank.chunks_exact(dim)
        .map(|r| {
            let sq: f64 = token.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
            0.25 * sq
        })
        .fold(f64::INFINITY, f64::min)
}

/// Few-shot patch distances of the `slot`-th bank layer on the token grid.
pub fn few_shot_patch_scores(
    tokens: &PatchTokenSet,
    bank: &MemoryBank,
    slot: usize,
) -> Result<AnomalyMap> {
    check_dim(bank.dim(), tokens.dim())?;
    if bank.rows() == 0 {
        return Err(KeadError::EmptyBank);
    }
    let layer = bank.layers[slot];
    let scores = tokens
        .layer(layer)
        .map(|a| {
            let a = unit(a).ok_or(KeadError::ZeroVector)?;
            Ok(nearest_distance(&a, &bank.banks[slot], bank.dim).clamp(0.0, 1.0) as f32)
        })
        .collect::<Result<Vec<_>>>()?;
    let (rows, cols) = tokens.grid();
    Ok(AnomalyMap::new(rows, cols, scores))
}

/// Few-shot anomaly map: per bank layer, nearest-reference distances
/// upsampled to `(height, width)`, then averaged over layers.
pub fn few_shot_map(
    tokens: &PatchTokenSet,
    bank: &MemoryBank,
    height: usize,
    width: usize,
) -> Result<AnomalyMap> {
    if height == 0 || width == 0 {
        return Err(KeadError::InvalidConfig(
            "output size must be at least 1x1".into(),
        ));
    }
    let layers = (0..bank.layers.len())
        .map(|slot| {
            few_shot_patch_scores(tokens, bank, slot).map(|g| bilinear_resize(&g, height, width))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fuse(layers.into_iter(), height, width))
}

/// Elementwise sum of the zero-shot and few-shot maps.
pub fn combined_map(zero: &AnomalyMap, few: &AnomalyMap) -> Result<AnomalyMap> {
    if zero.dims() != few.dims() {
        return Err(KeadError::SizeMismatch {
            left: zero.dims(),
            right: few.dims(),
        });
    }
    Ok(AnomalyMap::new(
        zero.height,
        zero.width,
        zero.values
            .iter()
            .zip(&few.values)
            .map(|(a, b)| a + b)
            .collect(),
    ))
}

/// Clamps every value into `[0, 1]`.
pub fn clip_unit(map: &mut AnomalyMap) {
    map.values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Final image score: the map maximum plus the image-level score.
pub fn final_score(map: &AnomalyMap, as_x: f64) -> Result<f64> {
    map.max()
        .map(|m| m as f64 + as_x)
        .ok_or(KeadError::EmptyMap)
}
