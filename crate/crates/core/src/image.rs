//! RGB images with `f64` samples in `[0, 1]`.

use aqua_autodiff::Tensor;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(vec![height, width, 3], vec![data.len()]));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Per-pixel channel mean, row-major.
    pub fn luminance(&self) -> Vec<f64> {
        self.data.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }

    /// `[3, H, W]` planar tensor.
    pub fn to_chw(&self) -> Tensor {
        let hw = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            let (c, p) = (i / hw, i % hw);
            self.data[p * 3 + c]
        })
    }

    pub fn from_chw(t: &Tensor) -> Result<Self> {
        if t.ndim() != 3 || t.dim(0) != 3 {
            return Err(Error::Invalid(format!("expected [3, H, W], got {:?}", t.shape())));
        }
        let (h, w) = (t.dim(1), t.dim(2));
        let hw = h * w;
        let mut data = vec![0.0; hw * 3];
        for c in 0..3 {
            for p in 0..hw {
                data[p * 3 + c] = t.data()[c * hw + p];
            }
        }
        Self::new(w, h, data)
    }
}
