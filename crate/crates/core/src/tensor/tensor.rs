use std::sync::Arc;

use super::{Scalar, TensorError};

/// Dense row-major tensor. Cloning shares the buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<(), TensorError> {
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel_of(&shape) != data.len() {
            return Err(TensorError::InvalidShape {
                reason: format!("{} elements for {} slots", data.len(), numel_of(&shape)),
                shape,
            });
        }
        let t = Tensor { shape, data: Arc::new(data) };
        if !t.all_finite() {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(t)
    }

    /// Construction for callers that already guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Tensor { shape, data: Arc::new(vec![value; n]) }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Vec::new(), data: Arc::new(vec![value]) }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| a.as_ref().clone())
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of range for axis {i} of extent {d}");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel_of(&shape) != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn ptr_eq(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }
}

/// Boolean validity mask (`true` = keep).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Arc<Vec<bool>>,
}

impl Mask {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<bool>) -> Result<Self, TensorError> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel_of(&shape) != data.len() {
            return Err(TensorError::InvalidShape {
                reason: format!("{} mask entries for {} slots", data.len(), numel_of(&shape)),
                shape,
            });
        }
        Ok(Mask { shape, data: Arc::new(data) })
    }

    pub fn all(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Mask { shape, data: Arc::new(vec![true; n]) }
    }

    /// `[t, t]` lower-triangular mask: row `t` keeps columns `0..=t`.
    pub fn causal(t: usize) -> Self {
        let mut data = vec![false; t * t];
        for r in 0..t {
            for c in 0..=r {
                data[r * t + c] = true;
            }
        }
        Mask { shape: vec![t, t], data: Arc::new(data) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if numel_of(&shape) != self.data.len() {
            return Err(TensorError::Shape {
                op: "mask reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Mask { shape, data: self.data.clone() })
    }

    /// Element-wise AND under broadcasting.
    pub fn and(&self, other: &Mask) -> Result<Mask, TensorError> {
        let out = super::broadcast::broadcast_shapes(&self.shape, &other.shape).ok_or_else(|| {
            TensorError::Shape { op: "mask and", lhs: self.shape.clone(), rhs: other.shape.clone() }
        })?;
        let ia = super::broadcast::source_indices(&out, &self.shape);
        let ib = super::broadcast::source_indices(&out, &other.shape);
        let data = ia.iter().zip(&ib).map(|(&a, &b)| self.data[a] && other.data[b]).collect();
        Ok(Mask { shape: out, data: Arc::new(data) })
    }

    /// Expand to `shape` by broadcasting.
    pub fn expand(&self, shape: &[usize]) -> Result<Mask, TensorError> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match super::broadcast::broadcast_shapes(&self.shape, shape) {
            Some(s) if s == shape => {
                let idx = super::broadcast::source_indices(shape, &self.shape);
                Ok(Mask {
                    shape: shape.to_vec(),
                    data: Arc::new(idx.iter().map(|&i| self.data[i]).collect()),
                })
            }
            _ => Err(TensorError::Shape {
                op: "mask expand",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            }),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
