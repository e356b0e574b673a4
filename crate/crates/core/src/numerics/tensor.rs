use std::fmt;

use super::meter;
use super::scalar::{DType, Scalar};
use crate::error::{Error, Result};

/// Dense row-major tensor.
///
/// The buffer length always equals the product of the shape. Allocations are
/// reported to [`meter`] so benchmarks can observe materialized
/// intermediates.
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Format(format!("shape {shape:?} needs {} elements, got {}", numel(shape), data.len())));
        }
        Ok(Self::wrap(shape.to_vec(), data))
    }

    fn wrap(shape: Vec<usize>, data: Vec<T>) -> Self {
        meter::record_alloc(data.len() * std::mem::size_of::<T>());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::wrap(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let data = (0..numel(shape)).map(f).collect();
        Self::wrap(shape.to_vec(), data)
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self::wrap(vec![r, c], data))
    }

    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self::wrap(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn size_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<T>()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(mut self) -> Vec<T> {
        meter::record_free(self.size_bytes());
        let data = std::mem::take(&mut self.data);
        self.shape.clear();
        data
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, s)| i >= s) {
            return Err(Error::OutOfRange(format!("index {index:?} for shape {:?}", self.shape)));
        }
        let flat: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        Ok(self.data[flat])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` of a matrix. Vectors count as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            other => Err(Error::invalid(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.dims2().map(|(r, _)| r).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map(|(_, c)| c).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::wrap(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn map_inplace(&mut self, f: impl Fn(T) -> T) {
        self.data.iter_mut().for_each(|x| *x = f(*x));
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::wrap(self.shape.clone(), data))
    }

    pub fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    /// `self += alpha * other`, in place.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Copies rows `start..start + len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + len > r {
            return Err(Error::OutOfRange(format!("rows {start}..{} of {r}", start + len)));
        }
        Ok(Self::wrap(vec![len, c], self.data[start * c..(start + len) * c].to_vec()))
    }

    /// Copies columns `start..start + width` of a matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start + width > c {
            return Err(Error::OutOfRange(format!("cols {start}..{} of {c}", start + width)));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Ok(Self::wrap(vec![r, width], data))
    }

    /// Writes `block` into columns `start..start + block.cols()`.
    pub fn set_column_block(&mut self, start: usize, block: &Self) -> Result<()> {
        let (r, c) = self.dims2()?;
        let (br, bw) = block.dims2()?;
        if br != r || start + bw > c {
            return Err(Error::shape("set_column_block", &self.shape, &block.shape));
        }
        for i in 0..r {
            self.data[i * c + start..i * c + start + bw].copy_from_slice(&block.data[i * bw..(i + 1) * bw]);
        }
        Ok(())
    }

    /// Accumulates `block` into columns `start..start + block.cols()`.
    pub fn add_column_block(&mut self, start: usize, block: &Self) -> Result<()> {
        let (r, c) = self.dims2()?;
        let (br, bw) = block.dims2()?;
        if br != r || start + bw > c {
            return Err(Error::shape("add_column_block", &self.shape, &block.shape));
        }
        for i in 0..r {
            for (a, &b) in
                self.data[i * c + start..i * c + start + bw].iter_mut().zip(&block.data[i * bw..(i + 1) * bw])
            {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn concat_columns(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let r = first.dims2()?.0;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pr != r {
                return Err(Error::shape("concat_columns", &first.shape, &p.shape));
            }
            total += pc;
        }
        let mut out = Self::zeros(&[r, total]);
        let mut at = 0;
        for p in parts {
            out.set_column_block(at, p)?;
            at += p.cols();
        }
        Ok(out)
    }

    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let c = first.dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pc != c {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
            rows += pr;
        }
        Ok(Self::wrap(vec![rows, c], data))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::wrap(self.shape.clone(), self.data.iter().map(|&x| U::of(x.as_f64())).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// `max|self - reference| / max|reference|`, with an all-zero reference
    /// falling back to the absolute difference.
    pub fn rel_error(&self, reference: &Self) -> Result<f64> {
        let diff = self.max_abs_diff(reference)?.as_f64();
        let scale = reference.max_abs().as_f64();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self::wrap(self.shape.clone(), self.data.clone())
    }
}

impl<T: Scalar> Drop for Tensor<T> {
    fn drop(&mut self) {
        meter::record_free(self.data.len() * std::mem::size_of::<T>());
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor<{}>{:?} [", T::DTYPE, self.shape)?;
        for (i, x) in self.data.iter().take(PREVIEW).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{x}")?;
        }
        if self.data.len() > PREVIEW {
            write!(f, ", ... ({} more)", self.data.len() - PREVIEW)?;
        }
        f.write_str("]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::<f64>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.strides(), vec![3, 1]);
    }

    #[test]
    fn column_blocks_round_trip() {
        let t = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64);
        let left = t.column_block(0, 1).unwrap();
        let right = t.column_block(1, 3).unwrap();
        let back = Tensor::concat_columns(&[&left, &right]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn meter_tracks_live_tensors() {
        let (_, peak) = meter::measure(|| {
            let a = Tensor::<f32>::zeros(&[10, 10]);
            let b = a.clone();
            drop(a);
            drop(b);
        });
        assert_eq!(peak, 2 * 100 * 4);
    }

    #[test]
    fn get_checks_bounds() {
        let t = Tensor::<f64>::eye(2);
        assert_eq!(t.get(&[1, 1]).unwrap(), 1.0);
        assert!(t.get(&[2, 0]).is_err());
    }
}
