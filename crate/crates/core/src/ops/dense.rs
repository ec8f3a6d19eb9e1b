use crate::tensor::{Real, Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `weights · input + bias` with `weights` shaped `[m, n]`.
pub fn dense_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = check("dense_forward", input, weights)?;
    if bias.rank() != 1 || bias.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "dense_forward",
            axis: "bias length".into(),
            expected: m,
            actual: bias.len(),
        });
    }
    let x = input.data();
    let out = weights
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi))
        .collect();
    Tensor::from_vec(vec![m], out)
}

pub fn dense_backward<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>, weights: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (m, n) = check("dense_backward", input, weights)?;
    if grad_out.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "dense_backward",
            axis: "grad_out length".into(),
            expected: m,
            actual: grad_out.len(),
        });
    }
    let x = input.data();
    let g = grad_out.data();
    let mut grad_input = vec![T::zero(); n];
    let mut grad_weights = Vec::with_capacity(m * n);
    for (row, &gi) in weights.data().chunks_exact(n).zip(g) {
        for ((gin, &w), &xi) in grad_input.iter_mut().zip(row).zip(x) {
            *gin += w * gi;
            grad_weights.push(gi * xi);
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(vec![n], grad_input)?,
        weights: Tensor::from_vec(vec![m, n], grad_weights)?,
        bias: Tensor::from_vec(vec![m], g.to_vec())?,
    })
}

fn check<T: Real>(op: &'static str, input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize)> {
    if weights.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: "weights rank".into(),
            expected: 2,
            actual: weights.rank(),
        });
    }
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    if input.len() != n {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: "input length".into(),
            expected: n,
            actual: input.len(),
        });
    }
    Ok((m, n))
}
