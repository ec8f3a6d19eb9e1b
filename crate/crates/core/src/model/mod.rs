//! 3D convolutional autoencoder.
//!
//! Encoder: stride-`s` convolution blocks with leaky-ReLU, flattened into a
//! dense linear bottleneck of `latent_dim` units. Decoder: a dense layer with
//! leaky-ReLU back to the encoder's final grid, then transposed-convolution
//! blocks mirroring the encoder. The last block is linear so
//! reconstructions can reach the intensity bounds exactly.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{
    conv3d_backward, conv3d_forward, deconv3d_backward, deconv3d_forward, dense_backward, dense_forward, l1_loss,
    l1_loss_with_grad, leaky_relu, leaky_relu_backward, ConvSpec,
};
use crate::rng::rng_from_seed;
use crate::tensor::{ParamBlock, Real, Tensor, TensorError};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid autoencoder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub input_shape: [usize; 3],
    /// Encoder widths; the decoder mirrors them back down to one channel.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub latent_dim: usize,
    pub slope: f64,
    pub init_seed: u64,
}

impl AeConfig {
    pub fn desk() -> Self {
        Self {
            input_shape: [16, 16, 16],
            channels: vec![8, 16, 32],
            kernel: 3,
            stride: 2,
            latent_dim: 32,
            slope: 0.01,
            init_seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            input_shape: [64, 77, 66],
            channels: vec![32, 64, 128, 256],
            kernel: 3,
            stride: 2,
            latent_dim: 512,
            slope: 0.01,
            init_seed: 0,
        }
    }

    /// Propagates shapes through every block and checks the decoder lands
    /// back on `input_shape`.
    pub fn plan(&self) -> Result<Plan, ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.channels.is_empty() {
            return bad("at least one encoder block is required".into());
        }
        if self.channels.contains(&0) || self.latent_dim == 0 || self.kernel == 0 || self.stride == 0 {
            return bad("channel counts, latent_dim, kernel and stride must all be at least 1".into());
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if !self.slope.is_finite() {
            return bad("activation slope must be finite".into());
        }
        let pad = self.kernel / 2;
        let widths: Vec<usize> = std::iter::once(1).chain(self.channels.iter().copied()).collect();

        let mut grids = vec![self.input_shape];
        let mut encoder = Vec::new();
        for block in 0..self.channels.len() {
            let spec = ConvSpec::cubic(widths[block], widths[block + 1], self.kernel, self.stride, pad);
            let next = spec.conv_output_extent(grids[block]).map_err(|e| {
                ModelError::InvalidConfig(format!("encoder block {block} on grid {:?}: {e}", grids[block]))
            })?;
            encoder.push(spec);
            grids.push(next);
        }

        let mut decoder = Vec::new();
        for block in (0..self.channels.len()).rev() {
            let (from, to) = (grids[block + 1], grids[block]);
            let mut output_padding = [0; 3];
            for a in 0..3 {
                let reach = (from[a] - 1) * self.stride + self.kernel;
                let target = to[a] + 2 * pad;
                if target < reach || target - reach >= self.stride {
                    return bad(format!(
                        "decoder block cannot map extent {} back to {} on axis {a}",
                        from[a], to[a]
                    ));
                }
                output_padding[a] = target - reach;
            }
            let spec = ConvSpec::cubic(widths[block + 1], widths[block], self.kernel, self.stride, pad)
                .with_output_padding(output_padding);
            debug_assert_eq!(spec.transposed_output_extent(from).ok(), Some(to));
            decoder.push(spec);
        }

        let bottleneck = *grids.last().expect("nonempty");
        let flat = widths[self.channels.len()] * bottleneck.iter().product::<usize>();
        Ok(Plan {
            encoder,
            decoder,
            bottleneck,
            flat,
        })
    }
}

/// Layer geometry derived from an [`AeConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub encoder: Vec<ConvSpec>,
    pub decoder: Vec<ConvSpec>,
    /// Spatial grid after the last encoder block.
    pub bottleneck: [usize; 3],
    /// Flattened encoder output length.
    pub flat: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeModel<T> {
    config: AeConfig,
    plan: Plan,
    params: Vec<ParamBlock<T>>,
    /// Seed of the most recent (re)initialization.
    init_seed: u64,
}

struct Layout {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    is_weight: bool,
}

fn layouts(config: &AeConfig, plan: &Plan) -> Vec<Layout> {
    let k3 = config.kernel.pow(3);
    let mut out = Vec::new();
    let mut push = |name: String, weight: Vec<usize>, bias: usize, fan_in: usize| {
        out.push(Layout {
            name: format!("{name}.weight"),
            shape: weight,
            fan_in,
            is_weight: true,
        });
        out.push(Layout {
            name: format!("{name}.bias"),
            shape: vec![bias],
            fan_in,
            is_weight: false,
        });
    };
    for (i, s) in plan.encoder.iter().enumerate() {
        let k = s.kernel;
        push(format!("enc{i}"), vec![s.out_channels, s.in_channels, k[0], k[1], k[2]], s.out_channels, s.in_channels * k3);
    }
    push("enc_fc".into(), vec![config.latent_dim, plan.flat], config.latent_dim, plan.flat);
    push("dec_fc".into(), vec![plan.flat, config.latent_dim], plan.flat, config.latent_dim);
    for (i, s) in plan.decoder.iter().enumerate() {
        let k = s.kernel;
        push(format!("dec{i}"), vec![s.in_channels, s.out_channels, k[0], k[1], k[2]], s.out_channels, s.in_channels * k3);
    }
    out
}

/// Kaiming-uniform fan-in initialization: weights `U(-b, b)` with
/// `b = sqrt(6 / fan_in)` (variance `2 / fan_in`), biases zero.
fn draw_params<T: Real>(config: &AeConfig, plan: &Plan, seed: u64) -> Vec<ParamBlock<T>> {
    let mut rng = rng_from_seed(seed);
    layouts(config, plan)
        .into_iter()
        .map(|l| {
            let n: usize = l.shape.iter().product();
            let data = if l.is_weight {
                let bound = (6.0 / l.fan_in as f64).sqrt();
                (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect()
            } else {
                vec![T::zero(); n]
            };
            ParamBlock {
                name: l.name,
                value: Tensor::from_vec(l.shape, data).expect("layout shapes are nonzero"),
            }
        })
        .collect()
}

pub fn init_model<T: Real>(config: &AeConfig) -> Result<AeModel<T>, ModelError> {
    let plan = config.plan()?;
    let params = draw_params(config, &plan, config.init_seed);
    Ok(AeModel {
        config: config.clone(),
        plan,
        params,
        init_seed: config.init_seed,
    })
}

/// Intermediate activations of one forward pass.
pub struct ForwardCache<T> {
    enc_in: Vec<Tensor<T>>,
    enc_pre: Vec<Tensor<T>>,
    flat: Tensor<T>,
    latent: Tensor<T>,
    dec_fc_pre: Tensor<T>,
    dec_in: Vec<Tensor<T>>,
    dec_pre: Vec<Tensor<T>>,
}

impl<T: Real> AeModel<T> {
    pub fn config(&self) -> &AeConfig {
        &self.config
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn params(&self) -> &[ParamBlock<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamBlock<T>] {
        &mut self.params
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Fresh draw with `new_seed`; the config (including its original
    /// `init_seed`) is kept. Optimizer state built for the old parameters
    /// must be discarded by the caller.
    pub fn reinitialize(&self, new_seed: u64) -> Self {
        Self {
            config: self.config.clone(),
            plan: self.plan.clone(),
            params: draw_params(&self.config, &self.plan, new_seed),
            init_seed: new_seed,
        }
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Real>(&self) -> AeModel<U> {
        AeModel {
            config: self.config.clone(),
            plan: self.plan.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamBlock {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            init_seed: self.init_seed,
        }
    }

    pub(crate) fn from_parts(config: AeConfig, params: Vec<ParamBlock<T>>, init_seed: u64) -> Result<Self, ModelError> {
        let plan = config.plan()?;
        let expected = layouts(&config, &plan);
        if expected.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (l, p) in expected.iter().zip(&params) {
            if l.name != p.name || l.shape != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter block `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    l.name,
                    l.shape
                )));
            }
            if !p.value.is_finite() {
                return Err(ModelError::Checkpoint(format!("parameter block `{}` is not finite", p.name)));
            }
        }
        Ok(Self {
            config,
            plan,
            params,
            init_seed,
        })
    }

    fn slope(&self) -> T {
        T::from_f64(self.config.slope)
    }

    fn n_blocks(&self) -> usize {
        self.plan.encoder.len()
    }

    fn weight(&self, layer: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.params[2 * layer].value, &self.params[2 * layer + 1].value)
    }

    fn check_volume(&self, volume: &Tensor<T>) -> Result<(), ModelError> {
        let want = self.config.input_shape;
        if volume.shape() != want {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "autoencoder input",
                axis: format!("shape {:?} (expected {want:?})", volume.shape()),
                expected: want.iter().product(),
                actual: volume.len(),
            }));
        }
        Ok(())
    }

    fn forward_cached(&self, volume: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>), ModelError> {
        self.check_volume(volume)?;
        let slope = self.slope();
        let blocks = self.n_blocks();
        let [d, h, w] = self.config.input_shape;

        let mut x = volume.clone().reshape(&[1, d, h, w])?;
        let mut enc_in = Vec::with_capacity(blocks);
        let mut enc_pre = Vec::with_capacity(blocks);
        for (i, spec) in self.plan.encoder.iter().enumerate() {
            let (wt, b) = self.weight(i);
            let pre = conv3d_forward(&x, wt, b, spec)?;
            enc_in.push(x);
            x = leaky_relu(&pre, slope);
            enc_pre.push(pre);
        }
        let flat = x.reshape(&[self.plan.flat])?;
        let (wt, b) = self.weight(blocks);
        let latent = dense_forward(&flat, wt, b)?;

        let (wt, b) = self.weight(blocks + 1);
        let dec_fc_pre = dense_forward(&latent, wt, b)?;
        let [bd, bh, bw] = self.plan.bottleneck;
        let mut y = leaky_relu(&dec_fc_pre, slope).reshape(&[self.config.channels[blocks - 1], bd, bh, bw])?;
        let mut dec_in = Vec::with_capacity(blocks);
        let mut dec_pre = Vec::with_capacity(blocks);
        for (j, spec) in self.plan.decoder.iter().enumerate() {
            let (wt, b) = self.weight(blocks + 2 + j);
            let pre = deconv3d_forward(&y, wt, b, spec)?;
            dec_in.push(y);
            y = if j + 1 == blocks { pre.clone() } else { leaky_relu(&pre, slope) };
            dec_pre.push(pre);
        }
        let out = y.reshape(&[d, h, w])?;
        debug_assert!(!volume.is_finite() || out.is_finite(), "non-finite reconstruction");
        Ok((
            out,
            ForwardCache {
                enc_in,
                enc_pre,
                flat,
                latent,
                dec_fc_pre,
                dec_in,
                dec_pre,
            },
        ))
    }

    pub fn encode(&self, volume: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_volume(volume)?;
        let slope = self.slope();
        let [d, h, w] = self.config.input_shape;
        let mut x = volume.clone().reshape(&[1, d, h, w])?;
        for (i, spec) in self.plan.encoder.iter().enumerate() {
            let (wt, b) = self.weight(i);
            x = leaky_relu(&conv3d_forward(&x, wt, b, spec)?, slope);
        }
        let flat = x.reshape(&[self.plan.flat])?;
        let (wt, b) = self.weight(self.n_blocks());
        Ok(dense_forward(&flat, wt, b)?)
    }

    pub fn decode(&self, latent: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        if latent.len() != self.config.latent_dim {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "decode",
                axis: "latent length".into(),
                expected: self.config.latent_dim,
                actual: latent.len(),
            }));
        }
        let slope = self.slope();
        let blocks = self.n_blocks();
        let (wt, b) = self.weight(blocks + 1);
        let [bd, bh, bw] = self.plan.bottleneck;
        let mut y = leaky_relu(&dense_forward(latent, wt, b)?, slope).reshape(&[
            self.config.channels[blocks - 1],
            bd,
            bh,
            bw,
        ])?;
        for (j, spec) in self.plan.decoder.iter().enumerate() {
            let (wt, b) = self.weight(blocks + 2 + j);
            let pre = deconv3d_forward(&y, wt, b, spec)?;
            y = if j + 1 == blocks { pre } else { leaky_relu(&pre, slope) };
        }
        Ok(y.reshape(&self.config.input_shape)?)
    }

    /// `(x_hat, l1_loss(x, x_hat))`.
    pub fn reconstruct(&self, volume: &Tensor<T>) -> Result<(Tensor<T>, f64), ModelError> {
        let x_hat = self.decode(&self.encode(volume)?)?;
        let loss = l1_loss(volume, &x_hat)?;
        Ok((x_hat, loss))
    }

    /// Reconstruction error of `volume`; higher means more anomalous.
    pub fn anomaly_score(&self, volume: &Tensor<T>) -> Result<f64, ModelError> {
        Ok(self.reconstruct(volume)?.1)
    }

    /// Per-sample L1 reconstruction loss and its gradient with respect to
    /// every parameter block, in [`AeModel::params`] order.
    pub fn loss_and_grads(&self, volume: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>), ModelError> {
        let (x_hat, cache) = self.forward_cached(volume)?;
        let (loss, grad_out) = l1_loss_with_grad(volume, &x_hat)?;
        let grads = self.backward(cache, grad_out)?;
        Ok((loss, grads))
    }

    fn backward(&self, cache: ForwardCache<T>, grad_out: Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
        let slope = self.slope();
        let blocks = self.n_blocks();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let mut set = |layer: usize, w: Tensor<T>, b: Tensor<T>| {
            grads[2 * layer] = Some(w);
            grads[2 * layer + 1] = Some(b);
        };

        let [d, h, w] = self.config.input_shape;
        let mut g = grad_out.reshape(&[1, d, h, w])?;
        for j in (0..blocks).rev() {
            if j + 1 != blocks {
                g = leaky_relu_backward(&g, &cache.dec_pre[j], slope)?;
            }
            let (wt, _) = self.weight(blocks + 2 + j);
            let cg = deconv3d_backward(&g, &cache.dec_in[j], wt, &self.plan.decoder[j])?;
            set(blocks + 2 + j, cg.weights, cg.bias);
            g = cg.input;
        }
        let g_flat = g.reshape(&[self.plan.flat])?;
        let g_pre = leaky_relu_backward(&g_flat, &cache.dec_fc_pre, slope)?;
        let (wt, _) = self.weight(blocks + 1);
        let dg = dense_backward(&g_pre, &cache.latent, wt)?;
        set(blocks + 1, dg.weights, dg.bias);

        let (wt, _) = self.weight(blocks);
        let dg = dense_backward(&dg.input, &cache.flat, wt)?;
        set(blocks, dg.weights, dg.bias);
        let last = &self.plan.encoder[blocks - 1];
        let [bd, bh, bw] = self.plan.bottleneck;
        let mut g = dg.input.reshape(&[last.out_channels, bd, bh, bw])?;
        for i in (0..blocks).rev() {
            g = leaky_relu_backward(&g, &cache.enc_pre[i], slope)?;
            let (wt, _) = self.weight(i);
            let cg = conv3d_backward(&g, &cache.enc_in[i], wt, &self.plan.encoder[i])?;
            set(i, cg.weights, cg.bias);
            g = cg.input;
        }
        Ok(grads.into_iter().map(|g| g.expect("every block receives a gradient")).collect())
    }
}
