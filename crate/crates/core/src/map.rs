//! Dense 2-D grids shared by the scoring, pseudo-labelling and metric modules.

use crate::tensorio::{Tensor, TensorError};

/// An `height × width` grid of per-pixel anomaly values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Self {
        assert_eq!(
            values.len(),
            height * width,
            "map buffer does not match dims"
        );
        Self {
            height,
            width,
            values,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest value, or `None` for an empty map.
    pub fn max(&self) -> Option<f32> {
        self.values.iter().copied().reduce(f32::max)
    }

    pub fn min(&self) -> Option<f32> {
        self.values.iter().copied().reduce(f32::min)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.clone())
            .expect("map dims always match its buffer")
    }

    /// Interprets a 2-D tensor as a map.
    pub fn from_tensor(t: Tensor) -> Result<Self, TensorError> {
        match *t.shape() {
            [h, w] => Ok(Self::new(h, w, t.into_data())),
            _ => Err(TensorError::Shape {
                expected: "(H, W)".into(),
                found: t.shape().to_vec(),
            }),
        }
    }
}

/// Boolean pixel mask with the same layout as [`AnomalyMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(
            bits.len(),
            height * width,
            "mask buffer does not match dims"
        );
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Reads a mask stored as a float tensor; any nonzero value is set.
    pub fn from_tensor(t: Tensor) -> Result<Self, TensorError> {
        let map = AnomalyMap::from_tensor(t)?;
        Ok(Self::new(
            map.height,
            map.width,
            map.values.iter().map(|&v| v != 0.0).collect(),
        ))
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.height, self.width], data).expect("mask dims always match")
    }
}
