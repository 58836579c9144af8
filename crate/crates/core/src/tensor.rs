//! Dense row-major tensors. Feature maps use `[batch, channels, height, width]`,
//! vectors use `[batch, features]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::Image;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape {shape:?}");
        Self { shape: shape.to_vec(), data }
    }

    /// Stacks images into a `[n, 3, h, w]` batch; all images must share a size.
    pub fn from_images(images: &[&Image]) -> Self {
        let (h, w) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            assert_eq!((img.height(), img.width()), (h, w), "batched images must share a size");
            data.extend(img.data().iter().map(|&v| T::of(f64::from(v))));
        }
        Self { shape: vec![images.len(), 3, h, w], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per leading-axis item.
    pub fn item_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn item(&self, i: usize) -> &[T] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.item_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Rows `range` along the leading axis.
    pub fn slice_items(&self, start: usize, end: usize) -> Self {
        let n = self.item_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self { shape, data: self.data[start * n..end * n].to_vec() }
    }

    pub fn concat_items(parts: &[&Self]) -> Self {
        let mut shape = parts[0].shape.clone();
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            assert_eq!(p.shape[1..], shape[1..], "concat shape mismatch");
            data.extend_from_slice(&p.data);
        }
        Self { shape, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
    }

    pub fn map_to<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }
}
