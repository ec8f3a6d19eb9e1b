//! Layer kernels checked against naive loop oracles and central finite
//! differences in f64.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sievae_core::ops::*;
use sievae_core::Tensor;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn idx4(s: &[usize], c: usize, d: usize, h: usize, w: usize) -> usize {
    ((c * s[1] + d) * s[2] + h) * s[3] + w
}

/// Direct-summation convolution over explicit signed coordinates.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let out_ext: Vec<usize> = (0..3).map(|a| (xs[a + 1] + 2 * p[a] - k[a]) / s[a] + 1).collect();
    let os = [spec.out_channels, out_ext[0], out_ext[1], out_ext[2]];
    let mut out = vec![0.0; os.iter().product()];
    for co in 0..os[0] {
        for od in 0..os[1] {
            for oh in 0..os[2] {
                for ow in 0..os[3] {
                    let mut acc = b.data()[co];
                    for ci in 0..spec.in_channels {
                        for a in 0..k[0] {
                            for bb in 0..k[1] {
                                for c in 0..k[2] {
                                    let id = (od * s[0] + a) as i64 - p[0] as i64;
                                    let ih = (oh * s[1] + bb) as i64 - p[1] as i64;
                                    let iw = (ow * s[2] + c) as i64 - p[2] as i64;
                                    if id < 0 || ih < 0 || iw < 0 || id >= xs[1] as i64 || ih >= xs[2] as i64 || iw >= xs[3] as i64 {
                                        continue;
                                    }
                                    let wv = w.data()[(((co * spec.in_channels + ci) * k[0] + a) * k[1] + bb) * k[2] + c];
                                    acc += wv * x.data()[idx4(xs, ci, id as usize, ih as usize, iw as usize)];
                                }
                            }
                        }
                    }
                    out[idx4(&os, co, od, oh, ow)] = acc;
                }
            }
        }
    }
    Tensor::from_vec(os.to_vec(), out).unwrap()
}

/// Scatter-accumulate transposed convolution: each input voxel stamps its
/// weighted kernel into the output.
fn naive_deconv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let (k, s, p, op) = (spec.kernel, spec.stride, spec.padding, spec.output_padding);
    let ext: Vec<usize> = (0..3).map(|a| (xs[a + 1] - 1) * s[a] + k[a] + op[a] - 2 * p[a]).collect();
    let os = [spec.out_channels, ext[0], ext[1], ext[2]];
    let mut out = vec![0.0; os.iter().product()];
    for co in 0..os[0] {
        let n = ext[0] * ext[1] * ext[2];
        out[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = b.data()[co]);
    }
    for ci in 0..xs[0] {
        for d in 0..xs[1] {
            for h in 0..xs[2] {
                for wi in 0..xs[3] {
                    let v = x.data()[idx4(xs, ci, d, h, wi)];
                    for co in 0..os[0] {
                        for a in 0..k[0] {
                            for bb in 0..k[1] {
                                for c in 0..k[2] {
                                    let od = (d * s[0] + a) as i64 - p[0] as i64;
                                    let oh = (h * s[1] + bb) as i64 - p[1] as i64;
                                    let ow = (wi * s[2] + c) as i64 - p[2] as i64;
                                    if od < 0 || oh < 0 || ow < 0 || od >= os[1] as i64 || oh >= os[2] as i64 || ow >= os[3] as i64 {
                                        continue;
                                    }
                                    let wv = w.data()[(((ci * os[0] + co) * k[0] + a) * k[1] + bb) * k[2] + c];
                                    out[idx4(&os, co, od as usize, oh as usize, ow as usize)] += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(os.to_vec(), out).unwrap()
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Max relative error between `analytic` and the central difference of
/// `f` with respect to every element of `param`.
fn fd_check(param: &Tensor<f64>, analytic: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..param.len() {
        let mut plus = param.clone();
        plus.data_mut()[i] += h;
        let mut minus = param.clone();
        minus.data_mut()[i] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

#[test]
fn conv_matches_naive_oracle_on_spec_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = ConvSpec::cubic(1, 2, 3, 2, 1);
    let x = random(&mut rng, &[1, 4, 4, 4]);
    let w = random(&mut rng, &[2, 1, 3, 3, 3]);
    let b = random(&mut rng, &[2]);
    let fast = conv3d_forward(&x, &w, &b, &spec).unwrap();
    assert_eq!(fast.shape(), &[2, 2, 2, 2]);
    assert!(max_abs_diff(&fast, &naive_conv(&x, &w, &b, &spec)) < 1e-6);
}

#[test]
fn conv_matches_oracle_on_all_small_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for cin in 1..=2 {
        for cout in 1..=2 {
            for d in 1..=5 {
                for hw in [3, 5] {
                    for (k, s, p) in [(1, 1, 0), (3, 1, 1), (3, 2, 1), (2, 2, 0), (3, 2, 0)] {
                        let spec = ConvSpec::cubic(cin, cout, k, s, p);
                        if spec.conv_output_extent([d, hw, 5]).is_err() {
                            continue;
                        }
                        let x = random(&mut rng, &[cin, d, hw, 5]);
                        let w = random(&mut rng, &[cout, cin, k, k, k]);
                        let b = random(&mut rng, &[cout]);
                        let fast = conv3d_forward(&x, &w, &b, &spec).unwrap();
                        assert!(max_abs_diff(&fast, &naive_conv(&x, &w, &b, &spec)) < 1e-6, "{spec:?} d={d} hw={hw}");
                    }
                }
            }
        }
    }
}

#[test]
fn f32_conv_tracks_f64_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = ConvSpec::cubic(2, 2, 3, 2, 1);
    let x = random(&mut rng, &[2, 5, 5, 5]);
    let w = random(&mut rng, &[2, 2, 3, 3, 3]);
    let b = random(&mut rng, &[2]);
    let fast = conv3d_forward(&x.cast::<f32>(), &w.cast::<f32>(), &b.cast::<f32>(), &spec).unwrap();
    assert!(max_abs_diff(&fast.cast::<f64>(), &naive_conv(&x, &w, &b, &spec)) < 1e-5);
}

#[test]
fn deconv_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, s, p, op) in [(3, 2, 1, 1), (3, 2, 1, 0), (2, 2, 0, 0), (3, 1, 1, 0), (4, 2, 1, 1)] {
        let spec = ConvSpec::cubic(2, 3, k, s, p).with_output_padding([op, 0, op]);
        let x = random(&mut rng, &[2, 3, 2, 4]);
        let w = random(&mut rng, &[2, 3, k, k, k]);
        let b = random(&mut rng, &[3]);
        let fast = deconv3d_forward(&x, &w, &b, &spec).unwrap();
        assert!(max_abs_diff(&fast, &naive_deconv(&x, &w, &b, &spec)) < 1e-6, "{spec:?}");
    }
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (k, s, p) in [(3, 2, 1), (3, 1, 1), (2, 2, 0)] {
        let spec = ConvSpec::cubic(2, 3, k, s, p);
        let x = random(&mut rng, &[2, 5, 4, 6]);
        let w = random(&mut rng, &[3, 2, k, k, k]);
        let b = random(&mut rng, &[3]);
        let probe = random(&mut rng, conv3d_forward(&x, &w, &b, &spec).unwrap().shape());
        let g = conv3d_backward(&probe, &x, &w, &spec).unwrap();
        let obj = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| conv3d_forward(x, w, b, &spec).unwrap().dot(&probe).unwrap();
        assert!(fd_check(&x, &g.input, |v| obj(v, &w, &b)) < 1e-4);
        assert!(fd_check(&w, &g.weights, |v| obj(&x, v, &b)) < 1e-4);
        assert!(fd_check(&b, &g.bias, |v| obj(&x, &w, v)) < 1e-4);
    }
}

#[test]
fn deconv_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (k, s, p, op) in [(3, 2, 1, 1), (3, 1, 1, 0), (2, 2, 0, 0)] {
        let spec = ConvSpec::cubic(3, 2, k, s, p).with_output_padding([op; 3]);
        let x = random(&mut rng, &[3, 3, 2, 3]);
        let w = random(&mut rng, &[3, 2, k, k, k]);
        let b = random(&mut rng, &[2]);
        let probe = random(&mut rng, deconv3d_forward(&x, &w, &b, &spec).unwrap().shape());
        let g = deconv3d_backward(&probe, &x, &w, &spec).unwrap();
        let obj = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| deconv3d_forward(x, w, b, &spec).unwrap().dot(&probe).unwrap();
        assert!(fd_check(&x, &g.input, |v| obj(v, &w, &b)) < 1e-4);
        assert!(fd_check(&w, &g.weights, |v| obj(&x, v, &b)) < 1e-4);
        assert!(fd_check(&b, &g.bias, |v| obj(&x, &w, v)) < 1e-4);
    }
}

#[test]
fn dense_matches_direct_matvec_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[8]);
    let w = random(&mut rng, &[4, 8]);
    let b = random(&mut rng, &[4]);
    let out = dense_forward(&x, &w, &b).unwrap();
    for i in 0..4 {
        let direct: f64 = b.data()[i] + (0..8).map(|j| w.data()[i * 8 + j] * x.data()[j]).sum::<f64>();
        assert!((out.data()[i] - direct).abs() < 1e-6);
    }
    let probe = random(&mut rng, &[4]);
    let g = dense_backward(&probe, &x, &w).unwrap();
    let obj = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dense_forward(x, w, b).unwrap().dot(&probe).unwrap();
    assert!(fd_check(&x, &g.input, |v| obj(v, &w, &b)) < 1e-4);
    assert!(fd_check(&w, &g.weights, |v| obj(&x, v, &b)) < 1e-4);
    assert!(fd_check(&b, &g.bias, |v| obj(&x, &w, v)) < 1e-4);
}

#[test]
fn leaky_relu_backward_matches_finite_differences_away_from_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[64]).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
    let probe = random(&mut rng, &[64]);
    let g = leaky_relu_backward(&probe, &x, 0.01).unwrap();
    assert!(fd_check(&x, &g, |v| leaky_relu(v, 0.01).dot(&probe).unwrap()) < 1e-4);
}

#[test]
fn l1_loss_matches_direct_sum_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[3, 4, 5]);
    let x_hat = random(&mut rng, &[3, 4, 5]);
    let (loss, grad) = l1_loss_with_grad(&x, &x_hat).unwrap();
    let direct = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 60.0;
    assert!((loss - direct).abs() < 1e-7);
    assert!(fd_check(&x_hat, &grad, |v| l1_loss(&x, v).unwrap()) < 1e-4);
}

#[test]
fn deterministic_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let spec = ConvSpec::cubic(2, 4, 3, 2, 1);
    let x = random(&mut rng, &[2, 6, 6, 6]).cast::<f32>();
    let w = random(&mut rng, &[4, 2, 3, 3, 3]).cast::<f32>();
    let b = random(&mut rng, &[4]).cast::<f32>();
    let a = conv3d_forward(&x, &w, &b, &spec).unwrap();
    let c = conv3d_forward(&x, &w, &b, &spec).unwrap();
    assert!(a.data().iter().zip(c.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// <conv(x), y> == <x, deconv(y)> with shared weights and zero bias.
    #[test]
    fn deconv_is_adjoint_of_conv(seed in any::<u64>(), cin in 1usize..3, cout in 1usize..3,
                                 d in 3usize..7, h in 3usize..7, w in 3usize..7,
                                 k in 1usize..4, s in 1usize..3) {
        let p = k / 2;
        let conv = ConvSpec::cubic(cin, cout, k, s, p);
        let small = conv.conv_output_extent([d, h, w]).unwrap();
        let mut op = [0; 3];
        for (a, &l) in [d, h, w].iter().enumerate() {
            op[a] = l + 2 * p - ((small[a] - 1) * s + k);
        }
        prop_assume!(op.iter().all(|&o| o < s));
        let deconv = ConvSpec::cubic(cout, cin, k, s, p).with_output_padding(op);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[cin, d, h, w]);
        let y = random(&mut rng, &[cout, small[0], small[1], small[2]]);
        let wt = random(&mut rng, &[cout, cin, k, k, k]);
        let lhs = conv3d_forward(&x, &wt, &Tensor::zeros(&[cout]).unwrap(), &conv).unwrap().dot(&y).unwrap();
        let back = deconv3d_forward(&y, &wt, &Tensor::zeros(&[cin]).unwrap(), &deconv).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let rhs = x.dot(&back).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1.0));
    }

    #[test]
    fn l1_loss_symmetric_nonnegative_zero_iff_equal(a in prop::collection::vec(-1.0f64..1.0, 1..50), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(vec![a.len()], a.clone()).unwrap();
        let y = random(&mut rng, &[a.len()]);
        let l_xy = l1_loss(&x, &y).unwrap();
        prop_assert_eq!(l_xy, l1_loss(&y, &x).unwrap());
        prop_assert!(l_xy >= 0.0);
        prop_assert_eq!(l_xy == 0.0, x == y);
        prop_assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
    }
}
