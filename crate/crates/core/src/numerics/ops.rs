//! Matrix products and pointwise maps.
//!
//! All products accumulate over the shared axis strictly left to right, so a
//! given dtype yields bit-identical results on every run.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        let orow = &mut od[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_a_bt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if k != kb {
        return Err(Error::shape("matmul_a_bt", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            od[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
        }
    }
    Ok(out)
}

/// `aᵀ · b` for `a: [k, m]`, `b: [k, n]`.
pub fn matmul_at_b<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::shape("matmul_at_b", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let api = ad[p * m + i];
            for (o, &bv) in od[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn elu<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub fn swish<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Pointwise operation selector for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Scale,
    Elu,
    Swish,
}

/// Second operand of a pointwise operation.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T: Scalar> {
    None,
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

pub fn elementwise<T: Scalar>(op: ElementwiseOp, a: &Tensor<T>, b: Operand<'_, T>) -> Result<Tensor<T>> {
    match (op, b) {
        (ElementwiseOp::Add, Operand::Tensor(b)) => a.zip_map(b, "add", |x, y| x + y),
        (ElementwiseOp::Add, Operand::Scalar(s)) => Ok(a.map(|x| x + s)),
        (ElementwiseOp::Mul, Operand::Tensor(b)) => a.zip_map(b, "mul", |x, y| x * y),
        (ElementwiseOp::Mul | ElementwiseOp::Scale, Operand::Scalar(s)) => Ok(a.map(|x| x * s)),
        (ElementwiseOp::Elu, Operand::None) => Ok(a.map(elu)),
        (ElementwiseOp::Swish, Operand::None) => Ok(a.map(swish)),
        (op, _) => Err(Error::invalid(format!("operand kind not valid for {op:?}"))),
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElementwiseOp::Add, a, Operand::Tensor(b))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElementwiseOp::Mul, a, Operand::Tensor(b))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

/// Euclidean norm over the trailing axis; the result keeps the leading axes
/// and has a trailing axis of size 1.
pub fn l2_norm_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if d == 0 {
        return Err(Error::invalid("l2 norm over an empty axis"));
    }
    let rows = x.len() / d;
    let data = (0..rows).map(|r| x.row(r).iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()).collect();
    let mut shape = x.shape().to_vec();
    if let Some(last) = shape.last_mut() {
        *last = 1;
    } else {
        shape.push(1);
    }
    Tensor::new(&shape, data)
}
