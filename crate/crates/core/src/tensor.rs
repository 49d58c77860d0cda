//! Dense row-major tensors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A dense tensor with row-major storage.
///
/// The invariant `dims.iter().product() == data.len()` holds for every
/// constructed value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("dims {:?} imply {} elements, got {}", dims, n, data.len()),
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(dims: Vec<usize>, value: T) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Number of rows when viewed as a matrix `[n, d]`.
    pub fn rows(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Row width when viewed as a matrix `[n, d]`.
    pub fn cols(&self) -> usize {
        if self.dims.len() < 2 {
            1
        } else {
            self.dims[1..].iter().product()
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn at3(&self, c: usize, h: usize, w: usize) -> T {
        let (hh, ww) = (self.dims[1], self.dims[2]);
        self.data[c * hh * ww + h * ww + w]
    }

    pub fn reshaped(&self, dims: Vec<usize>) -> Result<Self> {
        Tensor::new(dims, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), |m, d| if d > m { d } else { m })
    }
}

/// Spatial frame of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Frame {
    /// Top-down bird's-eye-view plane (LiDAR stream, fusion output).
    Bev,
    /// Camera image plane.
    Image,
}

/// A dense `[C, H, W]` feature tensor tagged with its spatial frame.
///
/// The tag never enters the math; it exists so wiring mistakes (an
/// image map fed where a BEV map belongs) fail loudly at the
/// boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    tensor: Tensor<T>,
    frame: Frame,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>, frame: Frame) -> Result<Self> {
        if tensor.rank() != 3 {
            return Err(Error::Shape {
                op: "feature_map",
                detail: format!("expected [c, h, w], got {:?}", tensor.dims()),
            });
        }
        Ok(FeatureMap { tensor, frame })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn dims(&self) -> &[usize] {
        self.tensor.dims()
    }

    pub fn expect_frame(&self, frame: Frame) -> Result<()> {
        if self.frame != frame {
            return Err(Error::Domain(format!(
                "feature map is in the {:?} frame, expected {:?}",
                self.frame, frame
            )));
        }
        Ok(())
    }
}


#[cfg(test)]
mod frame_tests {
    use super::*;

    #[test]
    fn frame_mismatch_is_reported() {
        let map = FeatureMap::new(Tensor::<f32>::zeros(vec![2, 3, 4]), Frame::Bev).unwrap();
        assert!(map.expect_frame(Frame::Bev).is_ok());
        assert!(matches!(
            map.expect_frame(Frame::Image),
            Err(Error::Domain(_))
        ));
        assert!(FeatureMap::new(Tensor::<f32>::zeros(vec![6]), Frame::Bev).is_err());
    }
}
