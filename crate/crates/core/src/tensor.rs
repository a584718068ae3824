//! Dense row-major `f32` tensor.
//!
//! There is no broadcasting: every operation that combines tensors requires
//! exactly matching shapes, and expansion is done with explicit helpers.

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err!("tensor rank must be at least 1"));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(shape_err!("dimension {axis} of {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics if `shape` has a zero entry or is empty.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .zip(self.strides())
            .map(|((&i, &d), s)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "elementwise operands disagree: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        let [rows, cols] = self.dims2()?;
        let mut out = vec![0.0; self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = self.data[r * cols + c];
            }
        }
        Tensor::new(vec![cols, rows], out)
    }

    /// Sub-tensor `start..end` along axis 0.
    pub fn narrow(&self, start: usize, end: usize) -> Result<Tensor> {
        let lead = self.shape[0];
        if start >= end || end > lead {
            return Err(shape_err!(
                "range {start}..{end} invalid for leading dimension {lead}"
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * inner..end * inner].to_vec())
    }

    /// Concatenates tensors along axis 0; trailing dimensions must agree.
    pub fn concat0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("nothing to concatenate"))?;
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(shape_err!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape,
                    p.shape
                ));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Tensor::new(shape, data)
    }

    /// Concatenates 2-D tensors along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("nothing to concatenate"))?;
        let rows = first.dims2()?[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let [r, c] = p.dims2()?;
            if r != rows {
                return Err(shape_err!(
                    "row count mismatch in column concat: {rows} vs {r}"
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        Tensor::new(vec![rows, total], data)
    }

    /// Copies a 2-D tensor `n` times into a new leading axis.
    pub fn expand_leading(&self, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(shape_err!("cannot expand to zero copies"));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shape);
        let mut data = Vec::with_capacity(self.data.len() * n);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Tensor::new(shape, data)
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(shape_err!("expected a 2-D tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(shape_err!("expected a 3-D tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(shape_err!("expected a 4-D tensor, got {:?}", self.shape)),
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `max |a - b|` over two equally shaped tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff: shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// `max |a - b| / max |b|`; falls back to the absolute error when `b` is zero.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f32 {
    let scale = b.max_abs();
    let diff = max_abs_diff(a, b);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}
