//! Typed views over tensors used throughout the pipeline.

use crate::error::{Error, Result};

use super::tensor::{Tensor, TensorData};

/// Label value excluded from losses and evaluation.
pub const IGNORE_LABEL: i32 = -1;

/// Row-major 2-D map.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Per-pixel class ids (1-based), possibly containing [`IGNORE_LABEL`].
pub type LabelMask = Grid<i32>;
/// Per-pixel quality estimate `s(k(z))`.
pub type QualityMap = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid { height, width, data: vec![value; height * width] }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Size("grid extents must be >= 1".into()));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{}x{} grid needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        let i = self.index(row, col);
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(f).collect() }
    }

    /// Sub-grid covering rows `r0..r0+h` and cols `c0..c0+w`.
    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> Grid<T>
    where
        T: Clone,
    {
        assert!(r0 + h <= self.height && c0 + w <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            let start = r * self.width + c0;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        Grid { height: h, width: w, data }
    }
}

impl Grid<i32> {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_i32(vec![self.height, self.width], self.data.clone()).expect("valid grid")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match (t.shape(), t.data()) {
            (&[h, w], TensorData::I32(v)) => Grid::from_vec(h, w, v.clone()),
            _ => Err(Error::Shape(format!(
                "expected (H,W) i32 label tensor, got {:?} {:?}",
                t.shape(),
                t.dtype()
            ))),
        }
    }
}

impl Grid<u8> {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_u8(vec![self.height, self.width], self.data.clone()).expect("valid grid")
    }
}

impl Grid<f64> {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(vec![self.height, self.width], self.data.clone()).expect("valid grid")
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel class probabilities, shape (H, W, C), stored in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 {
            return Err(Error::Size("probability map extents must be >= 1".into()));
        }
        if data.len() != height * width * classes {
            return Err(Error::Shape(format!(
                "({height},{width},{classes}) map needs {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        Ok(ProbMap { height, width, classes, data })
    }

    /// Accepts (H,W,C) tensors of dtype f32 or f64.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[h, w, c] = t.shape() else {
            return Err(Error::Shape(format!("expected (H,W,C) softmax, got {:?}", t.shape())));
        };
        match t.data() {
            TensorData::F32(_) | TensorData::F64(_) => Self::from_vec(h, w, c, t.to_f64_vec()),
            _ => Err(Error::Shape(format!("softmax must be floating point, got {:?}", t.dtype()))),
        }
    }

    pub fn to_tensor_f32(&self) -> Tensor {
        Tensor::from_f32(
            vec![self.height, self.width, self.classes],
            self.data.iter().map(|&x| x as f32).collect(),
        )
        .expect("valid map")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Probability row of pixel with flat index `z`.
    #[inline]
    pub fn row(&self, z: usize) -> &[f64] {
        &self.data[z * self.classes..(z + 1) * self.classes]
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.row(row * self.width + col)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn crop(&self, r0: usize, c0: usize, h: usize, w: usize) -> ProbMap {
        assert!(r0 + h <= self.height && c0 + w <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(h * w * self.classes);
        for r in r0..r0 + h {
            let start = (r * self.width + c0) * self.classes;
            data.extend_from_slice(&self.data[start..start + w * self.classes]);
        }
        ProbMap { height: h, width: w, classes: self.classes, data }
    }
}

/// 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Size("image extents must be >= 1".into()));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_u8(vec![self.height, self.width, 3], self.data.clone()).expect("valid image")
    }

    /// Crop of rows `r0..=r1`, cols `c0..=c1` (inclusive bounds).
    pub fn crop_inclusive(&self, r0: usize, c0: usize, r1: usize, c1: usize) -> RgbImage {
        assert!(r0 <= r1 && c0 <= c1 && r1 < self.height && c1 < self.width);
        let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
        let mut data = Vec::with_capacity(h * w * 3);
        for r in r0..=r1 {
            let start = (r * self.width + c0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        RgbImage { height: h, width: w, data }
    }
}
