//! Dense row-major tensors.
//!
//! Four-dimensional tensors follow the (batch, channels, height, width)
//! convention. Storage is reference counted so cloning a tensor (as the
//! autodiff tape does when capturing operands) is cheap; mutation goes
//! through copy-on-write.

mod conv;
mod resample;

pub use conv::{conv2d, conv2d_backward_input, conv2d_backward_weight, conv_output_size};
pub use resample::{
    crop_bottom_right, crop_bottom_right_backward, maxpool2, maxpool2_backward, pad_reflect,
    pad_reflect_backward, upsample2, upsample2_backward,
};

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                alloc::format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Builds a tensor whose length is known to match `shape`.
    pub(crate) fn from_parts(shape: &[usize], data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(&[1], vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|rc| (*rc).clone())
    }

    /// Extents of a 4-D tensor as `(b, c, h, w)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(Error::invalid(
                "dims4",
                alloc::format!("expected a 4-D tensor, got shape {:?}", s),
            )),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self::from_parts(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.len() as f64)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            &self.shape,
            self.data.iter().map(|v| U::of(v.f64())).collect(),
        )
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let (b, _, h, w) = first.dims4()?;
        let mut total_c = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total_c * plane);
        for bi in 0..b {
            for p in parts {
                let pc = p.shape[1];
                let start = bi * pc * plane;
                out.extend_from_slice(&p.data[start..start + pc * plane]);
            }
        }
        Ok(Self::from_parts(&[b, total_c, h, w], out))
    }

    /// Channels `[start, end)` of a 4-D tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if start > end || end > c {
            return Err(Error::invalid(
                "slice_channels",
                alloc::format!("range {}..{} out of {} channels", start, end, c),
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * (end - start) * plane);
        for bi in 0..b {
            let base = bi * c * plane;
            out.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Ok(Self::from_parts(&[b, end - start, h, w], out))
    }

    /// Samples `[start, end)` along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if start > end || end > b {
            return Err(Error::invalid("slice_batch", "range out of bounds"));
        }
        let per = c * h * w;
        Ok(Self::from_parts(
            &[end - start, c, h, w],
            self.data[start * per..end * per].to_vec(),
        ))
    }

    /// Concatenates 4-D tensors along the batch axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_batch", "no inputs"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut b = 0;
        let mut out = Vec::new();
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pc, ph, pw) != (c, h, w) {
                return Err(Error::shape("concat_batch", first.shape(), p.shape()));
            }
            b += pb;
            out.extend_from_slice(p.data());
        }
        Ok(Self::from_parts(&[b, c, h, w], out))
    }
}
