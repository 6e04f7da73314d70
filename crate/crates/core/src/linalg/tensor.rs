use crate::error::{Error, Result};

use super::DenseMatrix;

/// Batch of images in `B × H × W × C` (channels-last) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != batch * height * width * channels {
            return Err(Error::shape(
                "Tensor4::new",
                format!("{batch}x{height}x{width}x{channels}"),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite tensor entry"));
        }
        Ok(Self {
            batch,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            batch,
            height,
            width,
            channels,
            data: vec![0.0; batch * height * width * channels],
        }
    }

    /// `(batch, height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.height, self.width, self.channels)
    }

    pub fn dims_str(&self) -> String {
        format!(
            "{}x{}x{}x{}",
            self.batch, self.height, self.width, self.channels
        )
    }

    #[inline]
    pub fn index(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        ((b * self.height + y) * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(b, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(b, y, x, c);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Views the tensor as a `(B·H·W) × C` matrix (same memory order).
    pub fn to_pixel_matrix(&self) -> DenseMatrix {
        DenseMatrix::new(
            self.batch * self.height * self.width,
            self.channels,
            self.data.clone(),
        )
        .expect("tensor data is finite with matching length")
    }

    /// Inverse of [`Tensor4::to_pixel_matrix`].
    pub fn from_pixel_matrix(
        m: DenseMatrix,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if m.rows() != batch * height * width {
            return Err(Error::shape(
                "Tensor4::from_pixel_matrix",
                m.shape_str(),
                format!("{batch}x{height}x{width}"),
            ));
        }
        let channels = m.cols();
        Ok(Self {
            batch,
            height,
            width,
            channels,
            data: m.into_data(),
        })
    }

    /// Flattens to `B × (H·W·C)`.
    pub fn flatten(&self) -> DenseMatrix {
        DenseMatrix::new(
            self.batch,
            self.height * self.width * self.channels,
            self.data.clone(),
        )
        .expect("tensor data is finite with matching length")
    }

    /// Gathers the listed batch items in order.
    pub fn select(&self, idx: &[usize]) -> Tensor4 {
        let item = self.height * self.width * self.channels;
        let mut data = Vec::with_capacity(idx.len() * item);
        for &i in idx {
            data.extend_from_slice(&self.data[i * item..(i + 1) * item]);
        }
        Tensor4 {
            batch: idx.len(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}
