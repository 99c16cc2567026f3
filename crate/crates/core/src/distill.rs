//! Attention-map distillation targets, losses and analytic gradients.
//!
//! A backbone feature map `C × H × W` is reduced to a spatial attention map
//! by summing squares over channels. Each anomaly map is bilinearly resized
//! to the attention map's size and compared either with a mean squared error
//! (optionally after L2-normalizing both flattened maps) or with a cosine
//! distance. Gradients are taken with respect to the attention values; use
//! [`feature_gradient`] to chain them back onto the raw features.
//!
//! Everything here is plain `f64` math. No optimizer runs in this crate.

use thiserror::Error;

use crate::kead::bilinear_resize;
use crate::map::AnomalyMap;

const DEGENERATE_NORM: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum DistillError {
    #[error("layer {layer}: attention is {attention:?} but target is {target:?}")]
    SizeMismatch {
        layer: usize,
        attention: (usize, usize),
        target: (usize, usize),
    },
    #[error("layer {layer}: flattened map has (near) zero norm")]
    DegenerateNorm { layer: usize },
    #[error("layer {layer}: map is all zeros")]
    ZeroMap { layer: usize },
    #[error("initial task loss is zero; lambda is undefined")]
    ZeroTaskLoss,
    #[error("invalid input: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, DistillError>;

/// A `channels × height × width` feature map, row-major per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(DistillError::Invalid("feature dims must be >= 1".into()));
        }
        if values.len() != channels * height * width {
            return Err(DistillError::Invalid(format!(
                "{} values for a {channels}x{height}x{width} feature map",
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }
}

/// A nonnegative `height × width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

pub type AttentionMap = Grid;

/// Channel-wise sum of squares.
pub fn attention_map(f: &FeatureMap) -> AttentionMap {
    let plane = f.height * f.width;
    let mut out = vec![0.0; plane];
    for channel in f.values.chunks_exact(plane) {
        for (o, &v) in out.iter_mut().zip(channel) {
            *o += v * v;
        }
    }
    Grid::new(f.height, f.width, out)
}

/// Chains a gradient w.r.t. attention values onto the feature map:
/// `∂L/∂f(c,i,j) = 2 f(c,i,j) · ∂L/∂A'(i,j)`.
pub fn feature_gradient(f: &FeatureMap, attention_grad: &[f64]) -> Vec<f64> {
    let plane = f.height * f.width;
    assert_eq!(attention_grad.len(), plane);
    f.values
        .chunks_exact(plane)
        .flat_map(|channel| channel.iter().zip(attention_grad).map(|(v, g)| 2.0 * v * g))
        .collect()
}

/// Resizes an anomaly map to a layer's spatial size.
pub fn resize_target(map: &AnomalyMap, height: usize, width: usize) -> Grid {
    let r = bilinear_resize(map, height, width);
    Grid::new(height, width, r.values.iter().map(|&v| v as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    None,
    /// Divide each flattened map by its Euclidean norm.
    #[default]
    L2Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    L2,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillLayer {
    pub attention: AttentionMap,
    pub target: Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillBatch {
    pub layers: Vec<DistillLayer>,
    pub normalization: Normalization,
}

impl DistillBatch {
    fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DistillError::Invalid("batch has no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.attention.dims() != layer.target.dims() {
                return Err(DistillError::SizeMismatch {
                    layer: l,
                    attention: layer.attention.dims(),
                    target: layer.target.dims(),
                });
            }
        }
        Ok(())
    }
}

/// Loss value and per-layer gradients w.r.t. attention values.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `Σ_l 1/(H_l W_l) Σ_ij (Â − M̂)²` after the configured normalization.
pub fn l2_distill_loss(batch: &DistillBatch) -> Result<LossGrad> {
    batch.check()?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.layers.len());
    for (l, layer) in batch.layers.iter().enumerate() {
        let a = &layer.attention.values;
        let m = &layer.target.values;
        let n = a.len() as f64;
        match batch.normalization {
            Normalization::None => {
                let mut sum = 0.0;
                let g = a
                    .iter()
                    .zip(m)
                    .map(|(x, y)| {
                        let d = x - y;
                        sum += d * d;
                        2.0 * d / n
                    })
                    .collect();
                loss += sum / n;
                grads.push(g);
            }
            Normalization::L2Flatten => {
                let (na, nm) = (norm(a), norm(m));
                if na < DEGENERATE_NORM || nm < DEGENERATE_NORM {
                    return Err(DistillError::DegenerateNorm { layer: l });
                }
                let ah: Vec<f64> = a.iter().map(|x| x / na).collect();
                let diff: Vec<f64> = ah.iter().zip(m).map(|(x, y)| x - y / nm).collect();
                loss += diff.iter().map(|d| d * d).sum::<f64>() / n;
                // d/da of f(a/|a|) with upstream g: (g − â(â·g)) / |a|.
                let up: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
                let proj: f64 = ah.iter().zip(&up).map(|(x, g)| x * g).sum();
                grads.push(
                    ah.iter()
                        .zip(&up)
                        .map(|(x, g)| (g - x * proj) / na)
                        .collect(),
                );
            }
        }
    }
    Ok(LossGrad { loss, grads })
}

/// `Σ_l (1 − cos(flatten(A'_l), flatten(M_l)))`. The batch's normalization
/// setting does not affect it.
pub fn cosine_distill_loss(batch: &DistillBatch) -> Result<LossGrad> {
    batch.check()?;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.layers.len());
    for (l, layer) in batch.layers.iter().enumerate() {
        let a = &layer.attention.values;
        let m = &layer.target.values;
        let (na, nm) = (norm(a), norm(m));
        if na == 0.0 || nm == 0.0 {
            return Err(DistillError::ZeroMap { layer: l });
        }
        let cos = a.iter().zip(m).map(|(x, y)| x * y).sum::<f64>() / (na * nm);
        loss += 1.0 - cos;
        grads.push(
            a.iter()
                .zip(m)
                .map(|(x, y)| -(y / nm - cos * x / na) / na)
                .collect(),
        );
    }
    Ok(LossGrad { loss, grads })
}

pub fn distill_loss(batch: &DistillBatch, kind: LossKind) -> Result<LossGrad> {
    match kind {
        LossKind::L2 => l2_distill_loss(batch),
        LossKind::Cosine => cosine_distill_loss(batch),
    }
}

/// Weight that equalizes the two loss terms at the first iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaBalance {
    pub l_distill_0: f64,
    pub l_task_0: f64,
    pub lambda: f64,
}

pub fn compute_lambda(l_distill_0: f64, l_task_0: f64) -> Result<LambdaBalance> {
    if !l_distill_0.is_finite() || !l_task_0.is_finite() {
        return Err(DistillError::Invalid(
            "initial losses must be finite".into(),
        ));
    }
    if l_task_0 == 0.0 {
        return Err(DistillError::ZeroTaskLoss);
    }
    Ok(LambdaBalance {
        l_distill_0,
        l_task_0,
        lambda: l_distill_0 / l_task_0,
    })
}

pub fn total_loss(l_distill: f64, l_task: f64, lambda: f64) -> f64 {
    l_distill + lambda * l_task
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(a: Vec<f64>, m: Vec<f64>, h: usize, w: usize) -> DistillLayer {
        DistillLayer {
            attention: Grid::new(h, w, a),
            target: Grid::new(h, w, m),
        }
    }

    #[test]
    fn attention_is_channel_sum_of_squares() {
        let f = FeatureMap::new(1, 1, 3, vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(attention_map(&f).values, vec![1.0, 4.0, 9.0]);
        let f = FeatureMap::new(2, 1, 2, vec![1.0, 0.0, 1.0, 0.5]).unwrap();
        assert_eq!(attention_map(&f).values, vec![2.0, 0.25]);
    }

    #[test]
    fn identical_maps_have_zero_loss() {
        let l = layer(vec![0.1, 0.5, 0.9, 0.3], vec![0.1, 0.5, 0.9, 0.3], 2, 2);
        for normalization in [Normalization::None, Normalization::L2Flatten] {
            let batch = DistillBatch {
                layers: vec![l.clone()],
                normalization,
            };
            assert_eq!(l2_distill_loss(&batch).unwrap().loss, 0.0);
        }
        let batch = DistillBatch {
            layers: vec![l],
            normalization: Normalization::None,
        };
        assert!(cosine_distill_loss(&batch).unwrap().loss.abs() < 1e-15);
    }

    #[test]
    fn unit_pixel_literal_loss() {
        let batch = DistillBatch {
            layers: vec![layer(vec![1.0], vec![0.0], 1, 1)],
            normalization: Normalization::None,
        };
        let r = l2_distill_loss(&batch).unwrap();
        assert_eq!(r.loss, 1.0);
        assert_eq!(r.grads, vec![vec![2.0]]);
    }

    #[test]
    fn cosine_cases() {
        let m = vec![0.2, 0.4, 0.0, 1.0];
        let scaled: Vec<f64> = m.iter().map(|x| 3.5 * x).collect();
        let batch = DistillBatch {
            layers: vec![layer(scaled, m, 2, 2)],
            normalization: Normalization::None,
        };
        assert!(cosine_distill_loss(&batch).unwrap().loss.abs() < 1e-15);

        let batch = DistillBatch {
            layers: vec![
                layer(vec![1.0, 0.0], vec![0.0, 2.0], 1, 2),
                layer(vec![0.0, 3.0], vec![1.0, 0.0], 2, 1),
            ],
            normalization: Normalization::None,
        };
        assert_eq!(cosine_distill_loss(&batch).unwrap().loss, 2.0);

        let batch = DistillBatch {
            layers: vec![layer(vec![0.0, 0.0], vec![1.0, 0.0], 1, 2)],
            normalization: Normalization::None,
        };
        assert_eq!(
            cosine_distill_loss(&batch).unwrap_err(),
            DistillError::ZeroMap { layer: 0 }
        );
    }

    #[test]
    fn errors() {
        let batch = DistillBatch {
            layers: vec![layer(vec![1.0, 2.0], vec![1.0, 2.0], 1, 2).clone()],
            normalization: Normalization::L2Flatten,
        };
        assert!(l2_distill_loss(&batch).is_ok());
        let mismatched = DistillBatch {
            layers: vec![DistillLayer {
                attention: Grid::new(1, 2, vec![1.0, 2.0]),
                target: Grid::new(2, 1, vec![1.0, 2.0]),
            }],
            normalization: Normalization::None,
        };
        assert!(matches!(
            l2_distill_loss(&mismatched),
            Err(DistillError::SizeMismatch { layer: 0, .. })
        ));
        let degenerate = DistillBatch {
            layers: vec![layer(vec![0.0, 0.0], vec![1.0, 2.0], 1, 2)],
            normalization: Normalization::L2Flatten,
        };
        assert_eq!(
            l2_distill_loss(&degenerate).unwrap_err(),
            DistillError::DegenerateNorm { layer: 0 }
        );
    }

    #[test]
    fn lambda_rule() {
        assert_eq!(compute_lambda(2.0, 4.0).unwrap().lambda, 0.5);
        assert_eq!(compute_lambda(3.0, 3.0).unwrap().lambda, 1.0);
        assert_eq!(
            compute_lambda(1.0, 0.0).unwrap_err(),
            DistillError::ZeroTaskLoss
        );
        assert_eq!(total_loss(1.0, 1.0, 0.0), 1.0);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
        let b = compute_lambda(0.75, 8.0).unwrap();
        assert_eq!(total_loss(0.75, 8.0, b.lambda), 1.5);
    }

    #[test]
    fn resize_target_delegates_to_bilinear() {
        let m = AnomalyMap::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let g = resize_target(&m, 3, 3);
        assert_eq!(g.values[4], 0.5);
        assert_eq!(resize_target(&m, 2, 2).values, vec![0.0, 1.0, 1.0, 0.0]);
    }
}
