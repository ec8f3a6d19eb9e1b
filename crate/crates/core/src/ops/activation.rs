use crate::tensor::{expect_same_shape, Real, Result, Tensor};

/// `x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu<T: Real>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|x| if x >= T::zero() { x } else { slope * x })
}

/// Derivative is 1 at `x >= 0` (including exactly 0) and `slope` below.
pub fn leaky_relu_backward<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    expect_same_shape("leaky_relu_backward", input.shape(), grad_out.shape())?;
    let mut grad = grad_out.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x < T::zero() {
            *g *= slope;
        }
    }
    Ok(grad)
}
