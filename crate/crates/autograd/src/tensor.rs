use std::fmt;
use std::sync::Arc;

use crate::ShapeError;

/// Dense row-major `f32` tensor with shared, copy-on-write storage.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("numel", &self.data.len())
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self, ShapeError> {
        if numel(shape) != data.len() {
            return Err(ShapeError::ElementCount {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access; clones the storage if it is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, ShapeError> {
        if numel(shape) != self.numel() {
            return Err(ShapeError::Reshape {
                from: self.shape.clone(),
                to: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Self {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes"
        );
        Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Self {
        let per = numel(&self.shape[1..]);
        let mut shape = self.shape.clone();
        shape[0] = len;
        Self::from_parts(shape, self.data[start * per..(start + len) * per].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self, ShapeError> {
        let first = items.first().ok_or(ShapeError::Empty)?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(ShapeError::Mismatch {
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = Vec::with_capacity(first.shape.len() + 1);
        shape.push(items.len());
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    /// Splits along the leading axis, dropping it.
    pub fn unstack(&self) -> Vec<Tensor> {
        let per = numel(&self.shape[1..]);
        self.data
            .chunks(per.max(1))
            .map(|chunk| Self::from_parts(self.shape[1..].to_vec(), chunk.to_vec()))
            .collect()
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Replicates `src` along its size-1 axes to `target`.
pub(crate) fn broadcast_data(src: &Tensor, target: &[usize]) -> Tensor {
    let src_shape = src.shape();
    assert_eq!(src_shape.len(), target.len(), "broadcast rank mismatch");
    let src_strides = strides(src_shape);
    // Effective input stride per output axis; zero along broadcast axes.
    let eff: Vec<usize> = (0..target.len())
        .map(|i| {
            if src_shape[i] == target[i] {
                src_strides[i]
            } else {
                assert_eq!(src_shape[i], 1, "cannot broadcast {src_shape:?} to {target:?}");
                0
            }
        })
        .collect();
    let total = numel(target);
    let mut out = Vec::with_capacity(total);
    let src_data = src.data();
    let rank = target.len();
    if rank == 0 || total == 0 {
        return Tensor::from_parts(target.to_vec(), src_data.iter().take(total).copied().collect());
    }
    let inner = target[rank - 1];
    let inner_stride = eff[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let outer = total / inner;
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
        if inner_stride == 0 {
            out.extend(std::iter::repeat(src_data[base]).take(inner));
        } else {
            out.extend_from_slice(&src_data[base..base + inner]);
        }
        for axis in (0..rank - 1).rev() {
            idx[axis] += 1;
            if idx[axis] < target[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Tensor::from_parts(target.to_vec(), out)
}

/// Sums `src` over the axes where `target` has size 1. Adjoint of `broadcast_data`.
pub(crate) fn sum_to_data(src: &Tensor, target: &[usize]) -> Tensor {
    let src_shape = src.shape();
    assert_eq!(src_shape.len(), target.len(), "sum_to rank mismatch");
    let tgt_strides = strides(target);
    let eff: Vec<usize> = (0..target.len())
        .map(|i| {
            if src_shape[i] == target[i] {
                tgt_strides[i]
            } else {
                assert_eq!(target[i], 1, "cannot sum {src_shape:?} to {target:?}");
                0
            }
        })
        .collect();
    let mut acc = vec![0f64; numel(target)];
    let rank = src_shape.len();
    let data = src.data();
    if rank == 0 {
        return src.clone();
    }
    let inner = src_shape[rank - 1];
    let inner_stride = eff[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let outer = if inner == 0 { 0 } else { data.len() / inner };
    for o in 0..outer {
        let base: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
        let row = &data[o * inner..(o + 1) * inner];
        if inner_stride == 0 {
            acc[base] += row.iter().map(|&v| v as f64).sum::<f64>();
        } else {
            for (a, &v) in acc[base..base + inner].iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        for axis in (0..rank - 1).rev() {
            idx[axis] += 1;
            if idx[axis] < src_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Tensor::from_parts(target.to_vec(), acc.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_and_sum_are_adjoint() {
        let small = Tensor::from_vec(&[2, 1, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let big = broadcast_data(&small, &[2, 4, 3]);
        assert_eq!(&big.data()[..6], &[1., 2., 3., 1., 2., 3.]);
        let back = sum_to_data(&big, &[2, 1, 3]);
        assert_eq!(back.data(), &[4., 8., 12., 16., 20., 24.]);
    }

    #[test]
    fn sum_over_trailing_axes() {
        let t = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(sum_to_data(&t, &[2, 1]).data(), &[6., 15.]);
        assert_eq!(sum_to_data(&t, &[1, 1]).data(), &[21.]);
        assert_eq!(sum_to_data(&t, &[1, 3]).data(), &[5., 7., 9.]);
    }

    #[test]
    fn reshape_rejects_wrong_count() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(t.reshape(&[5]).is_err());
        assert_eq!(t.reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn stack_roundtrip() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.unstack(), vec![a, b]);
    }
}
