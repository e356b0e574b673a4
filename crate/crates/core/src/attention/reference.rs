use super::{AttentionGrads, AttentionInputs};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_a_bt, matmul_at_b, Scalar, Tensor};
use crate::positional::build_decay_mask;

/// `(Q Kᵀ ⊙ M) V` with the full mask and score matrix materialized.
pub fn reference_forward<T: Scalar>(inputs: &AttentionInputs<'_, T>) -> Result<Tensor<T>> {
    let (n, _) = inputs.validate()?;
    let mask = build_decay_mask::<T>(n, inputs.lambda)?;
    reference_forward_masked(inputs.q, inputs.k, inputs.v, &mask)
}

/// Left-product attention with an explicit mask.
pub fn reference_forward_masked<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut scores = matmul_a_bt(q, k)?;
    apply_mask(&mut scores, mask)?;
    matmul(&scores, v)
}

fn apply_mask<T: Scalar>(scores: &mut Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    scores.check_same_shape(mask, "attention mask")?;
    for (s, &m) in scores.data_mut().iter_mut().zip(mask.data()) {
        *s *= m;
    }
    Ok(())
}

/// Unblocked analytic gradients of `O = A V`, `A = (Q Kᵀ) ⊙ M`:
/// `dV = Aᵀ dO`, `dA = (dO Vᵀ) ⊙ M`, `dQ = dA K`, `dK = dAᵀ Q`.
pub fn reference_backward<T: Scalar>(inputs: &AttentionInputs<'_, T>, d_out: &Tensor<T>) -> Result<AttentionGrads<T>> {
    let (n, _) = inputs.validate()?;
    d_out.check_same_shape(inputs.q, "attention dO")?;
    let mask = build_decay_mask::<T>(n, inputs.lambda)?;
    let mut a = matmul_a_bt(inputs.q, inputs.k)?;
    apply_mask(&mut a, &mask)?;
    let dv = matmul_at_b(&a, d_out)?;
    drop(a);
    let mut da = matmul_a_bt(d_out, inputs.v)?;
    apply_mask(&mut da, &mask)?;
    drop(mask);
    let dq = matmul(&da, inputs.k)?;
    let dk = matmul_at_b(&da, inputs.q)?;
    Ok(AttentionGrads { dq, dk, dv })
}

/// Non-causal right-product form `Q (Kᵀ V)`, `O(n·d²)`.
pub fn right_product_forward<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    q.check_same_shape(k, "right_product q/k")?;
    if k.rows() != v.rows() {
        return Err(Error::shape("right_product k/v", k.shape(), v.shape()));
    }
    let kv = matmul_at_b(k, v)?;
    matmul(q, &kv)
}

/// Causal softmax attention `softmax(Q Kᵀ / √d) V`, returning the output and
/// the probability matrix. Benchmark competitor only.
pub fn softmax_forward<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, d) = q.dims2()?;
    q.check_same_shape(k, "softmax q/k")?;
    q.check_same_shape(v, "softmax q/v")?;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut p = matmul_a_bt(q, k)?;
    for s in 0..n {
        let row = p.row_mut(s);
        let mut max = T::neg_infinity();
        for x in &mut row[..=s] {
            *x *= scale;
            max = max.max(*x);
        }
        let mut sum = T::zero();
        for x in &mut row[..=s] {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in &mut row[..=s] {
            *x = *x / sum;
        }
        row[s + 1..].iter_mut().for_each(|x| *x = T::zero());
    }
    let out = matmul(&p, v)?;
    Ok((out, p))
}

/// Backward of [`softmax_forward`] given its probability matrix.
pub fn softmax_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<AttentionGrads<T>> {
    let (n, d) = q.dims2()?;
    let scale = T::one() / T::of(d as f64).sqrt();
    let dv = matmul_at_b(probs, d_out)?;
    let mut ds = matmul_a_bt(d_out, v)?;
    for s in 0..n {
        let p = probs.row(s);
        let row = ds.row_mut(s);
        let inner: T = row.iter().zip(p).fold(T::zero(), |acc, (&g, &pp)| acc + g * pp);
        for (g, &pp) in row.iter_mut().zip(p) {
            *g = pp * (*g - inner) * scale;
        }
    }
    let dq = matmul(&ds, k)?;
    let dk = matmul_at_b(&ds, q)?;
    Ok(AttentionGrads { dq, dk, dv })
}
