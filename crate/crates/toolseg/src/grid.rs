//! Grid types shared across the crate.
//!
//! Images and annotations live in `[-1, 1]` as channel-first tensors; binary
//! masks are plain `u8` buffers so the metrics side never touches the tensor
//! stack.

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

/// H×W×C scene image, channel-first `(C, H, W)`, values in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct ImageGrid(Tensor);

/// Single-channel annotation, `(1, H, W)`, values in `[-1, 1]`.
///
/// Real annotations are binary at ±1; generator outputs are continuous.
#[derive(Debug, Clone)]
pub struct AnnotationGrid(Tensor);

fn check_rank3(t: &Tensor) -> Result<()> {
    if t.rank() != 3 {
        return Err(Error::ShapeMismatch {
            expected: "(C, H, W)".into(),
            got: format!("{:?}", t.dims()),
        });
    }
    Ok(())
}

impl ImageGrid {
    pub fn new(tensor: Tensor) -> Result<Self> {
        check_rank3(&tensor)?;
        Ok(Self(tensor))
    }

    /// Builds a `(C, H, W)` image from a row-major channel-first buffer.
    pub fn from_vec(data: Vec<f32>, channels: usize, h: usize, w: usize) -> Result<Self> {
        let t = Tensor::from_vec(data, (channels, h, w), &Device::Cpu)?;
        Self::new(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dims3().map(|(c, _, _)| c).unwrap_or(0)
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dims3().expect("rank checked at construction");
        (h, w)
    }
}

impl AnnotationGrid {
    pub fn new(tensor: Tensor) -> Result<Self> {
        check_rank3(&tensor)?;
        let (c, _, _) = tensor.dims3()?;
        if c != 1 {
            return Err(Error::ShapeMismatch {
                expected: "(1, H, W)".into(),
                got: format!("{:?}", tensor.dims()),
            });
        }
        Ok(Self(tensor))
    }

    pub fn from_vec(data: Vec<f32>, h: usize, w: usize) -> Result<Self> {
        let t = Tensor::from_vec(data, (1, h, w), &Device::Cpu)?;
        Self::new(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dims3().expect("rank checked at construction");
        (h, w)
    }

    /// Flattened row-major pixel values.
    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }
}

/// Binary mask, row-major, values 0/1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixels", h * w),
                got: format!("{}", data.len()),
            });
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Mask as a ±1 annotation grid.
    pub fn to_annotation(&self) -> Result<AnnotationGrid> {
        let data = self
            .data
            .iter()
            .map(|&v| if v != 0 { 1.0f32 } else { -1.0 })
            .collect();
        AnnotationGrid::from_vec(data, self.h, self.w)
    }
}
