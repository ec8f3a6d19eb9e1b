//! 3D convolution and transposed convolution with analytic adjoints.
//!
//! Both layers are expressed over one pair of grids: a *large* grid and a
//! *small* grid linked by `large = small * stride + tap - pad`. For a
//! convolution the input lives on the large grid; for a transposed
//! convolution the input lives on the small grid. Weights are always laid out
//! as `[small_channels, large_channels, kd, kh, kw]`, so a convolution weight
//! `[C_out, C_in, ..]` and a transposed-convolution weight `[C_in, C_out, ..]`
//! are the same array when one layer is the adjoint of the other.

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// Extra trailing extent on the output of a transposed convolution, used
    /// to hit odd target sizes. Must be smaller than the stride. Ignored by
    /// the forward convolution.
    pub output_padding: [usize; 3],
}

impl ConvSpec {
    /// Cubic kernel, uniform stride and padding, no output padding.
    pub fn cubic(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
            output_padding: [0; 3],
        }
    }

    pub fn with_output_padding(mut self, output_padding: [usize; 3]) -> Self {
        self.output_padding = output_padding;
        self
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        let invalid = |reason: String| Err(TensorError::InvalidSpec { op, reason });
        if self.in_channels == 0 || self.out_channels == 0 {
            return invalid("channel counts must be at least 1".into());
        }
        for axis in 0..3 {
            if self.kernel[axis] == 0 {
                return invalid(format!("kernel extent on spatial axis {axis} is 0"));
            }
            if self.stride[axis] == 0 {
                return invalid(format!("stride on spatial axis {axis} is 0"));
            }
            if self.output_padding[axis] >= self.stride[axis] {
                return invalid(format!(
                    "output padding {} on spatial axis {axis} must be smaller than stride {}",
                    self.output_padding[axis], self.stride[axis]
                ));
            }
        }
        Ok(())
    }

    /// `floor((in + 2p - k) / s) + 1` per spatial axis.
    pub fn conv_output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate("conv3d")?;
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.padding[axis];
            if padded < self.kernel[axis] {
                return Err(TensorError::InvalidSpec {
                    op: "conv3d",
                    reason: format!(
                        "spatial axis {axis}: padded extent {padded} is smaller than kernel {}",
                        self.kernel[axis]
                    ),
                });
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }

    /// `(in - 1) * s - 2p + k + output_padding` per spatial axis.
    pub fn transposed_output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate("deconv3d")?;
        let mut out = [0; 3];
        for axis in 0..3 {
            let full = (input[axis] - 1) * self.stride[axis] + self.kernel[axis] + self.output_padding[axis];
            let trim = 2 * self.padding[axis];
            if full <= trim {
                return Err(TensorError::InvalidSpec {
                    op: "deconv3d",
                    reason: format!("spatial axis {axis}: output extent would be below 1"),
                });
            }
            out[axis] = full - trim;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let op = "conv3d_forward";
    let large = check_activation(op, "input", input, spec.in_channels)?;
    check_weights(op, weights, spec.out_channels, spec.in_channels, spec)?;
    check_bias(op, bias, spec.out_channels)?;
    let small = spec.conv_output_extent(large)?;
    let geo = Geometry::new(large, small, spec);

    let mut out = bias_filled(bias, small)?;
    gather(&geo, input.data(), spec.in_channels, weights.data(), out.data_mut(), spec.out_channels);
    debug_assert!(!input.is_finite() || out.is_finite(), "{op}: non-finite output");
    Ok(out)
}

pub fn conv3d_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let op = "conv3d_backward";
    let large = check_activation(op, "input", input, spec.in_channels)?;
    check_weights(op, weights, spec.out_channels, spec.in_channels, spec)?;
    let small = spec.conv_output_extent(large)?;
    check_grid(op, "grad_out", grad_out, spec.out_channels, small)?;
    let geo = Geometry::new(large, small, spec);

    let mut grad_input = Tensor::zeros_like(input);
    scatter(&geo, grad_out.data(), spec.out_channels, weights.data(), grad_input.data_mut(), spec.in_channels);
    let mut grad_weights = Tensor::zeros_like(weights);
    weight_grad(&geo, input.data(), spec.in_channels, grad_out.data(), spec.out_channels, grad_weights.data_mut());
    let grad_bias = channel_sums(grad_out, spec.out_channels);
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

/// Transposed convolution. `weights` is `[C_in, C_out, kd, kh, kw]`.
pub fn deconv3d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let op = "deconv3d_forward";
    let small = check_activation(op, "input", input, spec.in_channels)?;
    check_weights(op, weights, spec.in_channels, spec.out_channels, spec)?;
    check_bias(op, bias, spec.out_channels)?;
    let large = spec.transposed_output_extent(small)?;
    let geo = Geometry::new(large, small, spec);

    let mut out = bias_filled(bias, large)?;
    scatter(&geo, input.data(), spec.in_channels, weights.data(), out.data_mut(), spec.out_channels);
    debug_assert!(!input.is_finite() || out.is_finite(), "{op}: non-finite output");
    Ok(out)
}

pub fn deconv3d_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let op = "deconv3d_backward";
    let small = check_activation(op, "input", input, spec.in_channels)?;
    check_weights(op, weights, spec.in_channels, spec.out_channels, spec)?;
    let large = spec.transposed_output_extent(small)?;
    check_grid(op, "grad_out", grad_out, spec.out_channels, large)?;
    let geo = Geometry::new(large, small, spec);

    let mut grad_input = Tensor::zeros_like(input);
    gather(&geo, grad_out.data(), spec.out_channels, weights.data(), grad_input.data_mut(), spec.in_channels);
    let mut grad_weights = Tensor::zeros_like(weights);
    weight_grad(&geo, grad_out.data(), spec.out_channels, input.data(), spec.in_channels, grad_weights.data_mut());
    let grad_bias = channel_sums(grad_out, spec.out_channels);
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
        bias: grad_bias,
    })
}

struct Geometry {
    large: [usize; 3],
    small: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Geometry {
    fn new(large: [usize; 3], small: [usize; 3], spec: &ConvSpec) -> Self {
        Self {
            large,
            small,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.padding,
        }
    }

    fn large_volume(&self) -> usize {
        self.large.iter().product()
    }

    fn small_volume(&self) -> usize {
        self.small.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Small-grid indices `o` on `axis` for which `o * s + tap - p` lands
    /// inside the large grid, as a half-open range.
    fn valid(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (s, p) = (self.stride[axis], self.pad[axis]);
        let lo = if p > tap { (p - tap).div_ceil(s) } else { 0 };
        let limit = self.large[axis] + p;
        let hi = if limit > tap { (limit - tap - 1) / s + 1 } else { 0 };
        (lo, hi.min(self.small[axis]))
    }

    /// Calls `f(small_row_offset, large_row_offset, w_lo, w_hi)` for every
    /// (d, h) row pair touched by kernel tap `(kd, kh, kw)`. Row offsets are
    /// within a single channel; `large` column for small column `o` is
    /// `o * stride_w + kw - pad_w`.
    #[inline]
    fn for_rows(&self, kd: usize, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (d_lo, d_hi) = self.valid(0, kd);
        let (h_lo, h_hi) = self.valid(1, kh);
        let (w_lo, w_hi) = self.valid(2, kw);
        if w_lo >= w_hi {
            return;
        }
        for od in d_lo..d_hi {
            let id = od * self.stride[0] + kd - self.pad[0];
            for oh in h_lo..h_hi {
                let ih = oh * self.stride[1] + kh - self.pad[1];
                let small_row = (od * self.small[1] + oh) * self.small[2];
                let large_row = (id * self.large[1] + ih) * self.large[2];
                f(small_row, large_row, w_lo, w_hi);
            }
        }
    }
}

/// Column matrix `[cl * taps, small_volume]` of large-grid values under each
/// kernel tap, zero outside the grid.
fn im2col<T: Real>(geo: &Geometry, large: &[T], cl: usize) -> Vec<T> {
    let (lv, sv, taps) = (geo.large_volume(), geo.small_volume(), geo.taps());
    let [_, kh_n, kw_n] = geo.kernel;
    let (sw, pw) = (geo.stride[2], geo.pad[2]);
    let mut cols = vec![T::zero(); cl * taps * sv];
    for c_l in 0..cl {
        let src = &large[c_l * lv..(c_l + 1) * lv];
        for t in 0..taps {
            let row = &mut cols[(c_l * taps + t) * sv..(c_l * taps + t + 1) * sv];
            let (kd, kh, kw) = (t / (kh_n * kw_n), (t / kw_n) % kh_n, t % kw_n);
            geo.for_rows(kd, kh, kw, |srow, lrow, lo, hi| {
                for ow in lo..hi {
                    row[srow + ow] = src[lrow + ow * sw + kw - pw];
                }
            });
        }
    }
    cols
}

/// Adjoint of [`im2col`]: adds each column entry back onto its large-grid voxel.
fn col2im<T: Real>(geo: &Geometry, cols: &[T], cl: usize, large: &mut [T]) {
    let (lv, sv, taps) = (geo.large_volume(), geo.small_volume(), geo.taps());
    let [_, kh_n, kw_n] = geo.kernel;
    let (sw, pw) = (geo.stride[2], geo.pad[2]);
    for c_l in 0..cl {
        let dst = &mut large[c_l * lv..(c_l + 1) * lv];
        for t in 0..taps {
            let row = &cols[(c_l * taps + t) * sv..(c_l * taps + t + 1) * sv];
            let (kd, kh, kw) = (t / (kh_n * kw_n), (t / kw_n) % kh_n, t % kw_n);
            geo.for_rows(kd, kh, kw, |srow, lrow, lo, hi| {
                for ow in lo..hi {
                    dst[lrow + ow * sw + kw - pw] += row[srow + ow];
                }
            });
        }
    }
}

/// small[cs, o] += sum over cl, taps of w[cs, cl, tap] * large[cl, o*s + tap - p]
fn gather<T: Real>(geo: &Geometry, large: &[T], cl: usize, weights: &[T], small: &mut [T], cs: usize) {
    let (sv, rows) = (geo.small_volume(), cl * geo.taps());
    let cols = im2col(geo, large, cl);
    T::gemm(cs, rows, sv, weights, (rows, 1), &cols, (sv, 1), T::one(), small);
}

/// large[cl, o*s + tap - p] += sum over cs, taps of w[cs, cl, tap] * small[cs, o]
fn scatter<T: Real>(geo: &Geometry, small: &[T], cs: usize, weights: &[T], large: &mut [T], cl: usize) {
    let (sv, rows) = (geo.small_volume(), cl * geo.taps());
    let mut cols = vec![T::zero(); rows * sv];
    T::gemm(rows, cs, sv, weights, (1, rows), small, (sv, 1), T::zero(), &mut cols);
    col2im(geo, &cols, cl, large);
}

/// grad_w[cs, cl, tap] = sum over o of small[cs, o] * large[cl, o*s + tap - p]
fn weight_grad<T: Real>(geo: &Geometry, large: &[T], cl: usize, small: &[T], cs: usize, grad_w: &mut [T]) {
    let (sv, rows) = (geo.small_volume(), cl * geo.taps());
    let cols = im2col(geo, large, cl);
    T::gemm(cs, sv, rows, small, (sv, 1), &cols, (1, sv), T::zero(), grad_w);
}

fn channel_sums<T: Real>(grad_out: &Tensor<T>, channels: usize) -> Tensor<T> {
    let per = grad_out.len() / channels;
    let sums = grad_out
        .data()
        .chunks_exact(per)
        .map(|ch| ch.iter().fold(T::zero(), |a, &b| a + b))
        .collect();
    Tensor::from_vec(vec![channels], sums).expect("channel count is nonzero")
}

fn bias_filled<T: Real>(bias: &Tensor<T>, spatial: [usize; 3]) -> Result<Tensor<T>> {
    let channels = bias.len();
    let per: usize = spatial.iter().product();
    let mut data = Vec::with_capacity(channels * per);
    for &b in bias.data() {
        data.extend(std::iter::repeat_n(b, per));
    }
    Tensor::from_vec(vec![channels, spatial[0], spatial[1], spatial[2]], data)
}

fn check_activation<T: Real>(op: &'static str, name: &str, t: &Tensor<T>, channels: usize) -> Result<[usize; 3]> {
    let shape = t.shape();
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: format!("{name} rank (expected C x D x H x W)"),
            expected: 4,
            actual: shape.len(),
        });
    }
    if shape[0] != channels {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: format!("{name} channels"),
            expected: channels,
            actual: shape[0],
        });
    }
    Ok([shape[1], shape[2], shape[3]])
}

fn check_grid<T: Real>(
    op: &'static str,
    name: &str,
    t: &Tensor<T>,
    channels: usize,
    spatial: [usize; 3],
) -> Result<()> {
    let got = check_activation(op, name, t, channels)?;
    for (axis, label) in ["depth", "height", "width"].iter().enumerate() {
        if got[axis] != spatial[axis] {
            return Err(TensorError::ShapeMismatch {
                op,
                axis: format!("{name} {label}"),
                expected: spatial[axis],
                actual: got[axis],
            });
        }
    }
    Ok(())
}

fn check_weights<T: Real>(
    op: &'static str,
    weights: &Tensor<T>,
    small_channels: usize,
    large_channels: usize,
    spec: &ConvSpec,
) -> Result<()> {
    let expected = [small_channels, large_channels, spec.kernel[0], spec.kernel[1], spec.kernel[2]];
    let shape = weights.shape();
    if shape.len() != 5 {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: "weights rank".into(),
            expected: 5,
            actual: shape.len(),
        });
    }
    for axis in 0..5 {
        if shape[axis] != expected[axis] {
            return Err(TensorError::ShapeMismatch {
                op,
                axis: format!("weights axis {axis}"),
                expected: expected[axis],
                actual: shape[axis],
            });
        }
    }
    Ok(())
}

fn check_bias<T: Real>(op: &'static str, bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.rank() != 1 || bias.len() != channels {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: "bias length".into(),
            expected: channels,
            actual: bias.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn scalar_conv_is_affine() {
        let spec = ConvSpec::cubic(1, 1, 1, 1, 0);
        let out = conv3d_forward(&t(&[1, 1, 1, 1], vec![5.0]), &t(&[1, 1, 1, 1, 1], vec![2.0]), &t(&[1], vec![1.0]), &spec).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn zero_input_yields_bias() {
        let spec = ConvSpec::cubic(2, 3, 3, 2, 1);
        let input = Tensor::<f64>::zeros(&[2, 5, 5, 5]).unwrap();
        let weights = Tensor::full(&[3, 2, 3, 3, 3], 0.7).unwrap();
        let bias = t(&[3], vec![-1.0, 0.5, 2.0]);
        let out = conv3d_forward(&input, &weights, &bias, &spec).unwrap();
        assert_eq!(out.shape(), &[3, 3, 3, 3]);
        for (c, chunk) in out.data().chunks(27).enumerate() {
            assert!(chunk.iter().all(|&v| v == bias.data()[c]));
        }
        let dout = deconv3d_forward(&Tensor::zeros(&[3, 3, 3, 3]).unwrap(), &weights, &t(&[2], vec![4.0, -4.0]), &ConvSpec::cubic(3, 2, 3, 2, 1)).unwrap();
        assert_eq!(dout.shape(), &[2, 5, 5, 5]);
        assert!(dout.data()[..125].iter().all(|&v| v == 4.0));
        assert!(dout.data()[125..].iter().all(|&v| v == -4.0));
    }

    #[test]
    fn scalar_backward_chain_rule() {
        let spec = ConvSpec::cubic(1, 1, 1, 1, 0);
        let x = t(&[1, 1, 1, 1], vec![5.0]);
        let w = t(&[1, 1, 1, 1, 1], vec![2.0]);
        let g = conv3d_backward(&t(&[1, 1, 1, 1], vec![1.0]), &x, &w, &spec).unwrap();
        assert_eq!(g.input.data(), &[2.0]);
        assert_eq!(g.weights.data(), &[5.0]);
        assert_eq!(g.bias.data(), &[1.0]);
        let g = deconv3d_backward(&t(&[1, 1, 1, 1], vec![1.0]), &x, &w, &spec).unwrap();
        assert_eq!(g.input.data(), &[2.0]);
        assert_eq!(g.weights.data(), &[5.0]);
        assert_eq!(g.bias.data(), &[1.0]);
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let spec = ConvSpec::cubic(2, 2, 3, 2, 1);
        let x = Tensor::full(&[2, 4, 4, 4], 0.3).unwrap();
        let w = Tensor::full(&[2, 2, 3, 3, 3], -0.2).unwrap();
        let g = conv3d_backward(&Tensor::zeros(&[2, 2, 2, 2]).unwrap(), &x, &w, &spec).unwrap();
        assert!(g.input.data().iter().chain(g.weights.data()).chain(g.bias.data()).all(|&v| v == 0.0));
        let y = Tensor::full(&[2, 2, 2, 2], 0.3).unwrap();
        let dspec = spec.with_output_padding([1, 1, 1]);
        let g = deconv3d_backward(&Tensor::zeros(&[2, 4, 4, 4]).unwrap(), &y, &w, &dspec).unwrap();
        assert!(g.input.data().iter().chain(g.weights.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_stamps_kernel() {
        let k = 3;
        let spec = ConvSpec::cubic(1, 1, k, 1, 0);
        let out = deconv3d_forward(&t(&[1, 1, 1, 1], vec![0.25]), &Tensor::full(&[1, 1, k, k, k], 1.0).unwrap(), &t(&[1], vec![0.0]), &spec).unwrap();
        assert_eq!(out.shape(), &[1, k, k, k]);
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn output_extents() {
        let spec = ConvSpec::cubic(1, 1, 3, 2, 1);
        assert_eq!(spec.conv_output_extent([16, 77, 66]).unwrap(), [8, 39, 33]);
        assert_eq!(spec.transposed_output_extent([8, 39, 33]).unwrap(), [15, 77, 65]);
        let spec = spec.with_output_padding([1, 0, 1]);
        assert_eq!(spec.transposed_output_extent([8, 39, 33]).unwrap(), [16, 77, 66]);
        assert!(ConvSpec::cubic(1, 1, 5, 1, 0).conv_output_extent([3, 8, 8]).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ConvSpec::cubic(1, 1, 0, 1, 0).conv_output_extent([4; 3]).is_err());
        assert!(ConvSpec::cubic(1, 1, 3, 0, 0).conv_output_extent([4; 3]).is_err());
        let spec = ConvSpec::cubic(1, 1, 3, 2, 1).with_output_padding([2, 0, 0]);
        assert!(spec.transposed_output_extent([4; 3]).is_err());
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let spec = ConvSpec::cubic(2, 1, 3, 1, 1);
        let x = Tensor::<f64>::zeros(&[3, 4, 4, 4]).unwrap();
        let w = Tensor::zeros(&[1, 2, 3, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        match conv3d_forward(&x, &w, &b, &spec).unwrap_err() {
            TensorError::ShapeMismatch { axis, expected: 2, actual: 3, .. } => assert_eq!(axis, "input channels"),
            e => panic!("{e:?}"),
        }
        let x = Tensor::<f64>::zeros(&[2, 4, 4, 4]).unwrap();
        let bad_w = Tensor::zeros(&[1, 2, 3, 2, 3]).unwrap();
        match conv3d_forward(&x, &bad_w, &b, &spec).unwrap_err() {
            TensorError::ShapeMismatch { axis, .. } => assert_eq!(axis, "weights axis 3"),
            e => panic!("{e:?}"),
        }
        let bad_g = Tensor::zeros(&[1, 4, 3, 4]).unwrap();
        match conv3d_backward(&bad_g, &x, &w, &spec).unwrap_err() {
            TensorError::ShapeMismatch { axis, .. } => assert_eq!(axis, "grad_out height"),
            e => panic!("{e:?}"),
        }
    }
}
