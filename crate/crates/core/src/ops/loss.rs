use crate::tensor::{expect_same_shape, Real, Result, Tensor};

/// Mean absolute error over all elements.
///
/// Absolute differences are formed in `T` and summed in `f64` in index
/// order; [`crate::eval::error_map`] followed by [`Tensor::mean`] reproduces
/// this value bit for bit.
pub fn l1_loss<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    expect_same_shape("l1_loss", x.shape(), x_hat.shape())?;
    let sum = x
        .data()
        .iter()
        .zip(x_hat.data())
        .fold(0.0f64, |acc, (&a, &b)| acc + (a - b).abs().as_f64());
    Ok(sum / x.len() as f64)
}

/// Loss together with its gradient with respect to `x_hat`:
/// `sign(x_hat - x) / count`, where `sign(0) = 0`.
pub fn l1_loss_with_grad<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let loss = l1_loss(x, x_hat)?;
    let scale = T::from_f64(1.0 / x.len() as f64);
    let mut grad = Tensor::zeros_like(x_hat);
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(x.data()).zip(x_hat.data()) {
        *g = if b > a {
            scale
        } else if b < a {
            -scale
        } else {
            T::zero()
        };
    }
    Ok((loss, grad))
}
