//! Batch normalization with learnable scale and shift.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel normalizer state. For `[B, n]` inputs a channel is a feature
/// column; for `[B, c, H, W]` inputs statistics pool over batch and space.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Variance regularizer, strictly positive.
    pub epsilon: f64,
    /// Running-stat retention: `r <- momentum * r + (1 - momentum) * batch`.
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// What backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    /// True when the normalization used batch statistics, so backward must
    /// include the coupling terms through the mean and variance.
    pub from_batch: bool,
}

/// Iterates per-channel element index lists for supported input ranks.
fn channel_slices(shape: &[usize], channels: usize) -> Result<(usize, usize, usize)> {
    // Returns (batch, spatial, channel_count_check) where each channel holds
    // batch * spatial elements.
    match *shape {
        [b, n] => {
            if n != channels {
                return Err(Error::dim(format!(
                    "input has {n} features, state has {channels}"
                )));
            }
            Ok((b, 1, n))
        }
        [b, c, h, w] => {
            if c != channels {
                return Err(Error::dim(format!(
                    "input has {c} channels, state has {channels}"
                )));
            }
            Ok((b, h * w, c))
        }
        _ => Err(Error::dim(format!(
            "batchnorm expects rank 2 or 4 input, got {shape:?}"
        ))),
    }
}

#[inline]
fn channel_index(
    rank2: bool,
    b: usize,
    c: usize,
    s: usize,
    channels: usize,
    spatial: usize,
) -> usize {
    if rank2 {
        b * channels + c
    } else {
        (b * channels + c) * spatial + s
    }
}

/// Normalizes each channel and applies the learned affine map. In training
/// mode statistics come from the batch (size >= 2 required) and the running
/// estimates are updated; in eval mode the running estimates are used and the
/// state is untouched.
pub fn batchnorm_forward(
    x: &Tensor,
    state: &mut BatchNormState,
    train: bool,
) -> Result<(Tensor, BnCache)> {
    if state.epsilon <= 0.0 {
        return Err(Error::State("batchnorm epsilon must be positive".into()));
    }
    let channels = state.channels();
    let (batch, spatial, _) = channel_slices(x.shape(), channels)?;
    if train && batch < 2 {
        return Err(Error::Input(
            "batchnorm training requires batch size >= 2".into(),
        ));
    }
    let rank2 = x.shape().len() == 2;
    let count = (batch * spatial) as f64;
    let xd = x.data();

    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    if train {
        for c in 0..channels {
            let mut m = 0.0;
            for b in 0..batch {
                for s in 0..spatial {
                    m += xd[channel_index(rank2, b, c, s, channels, spatial)];
                }
            }
            m /= count;
            let mut v = 0.0;
            for b in 0..batch {
                for s in 0..spatial {
                    let d = xd[channel_index(rank2, b, c, s, channels, spatial)] - m;
                    v += d * d;
                }
            }
            mean[c] = m;
            var[c] = v / count;
        }
        let rho = state.momentum;
        for c in 0..channels {
            state.running_mean[c] = rho * state.running_mean[c] + (1.0 - rho) * mean[c];
            state.running_var[c] = rho * state.running_var[c] + (1.0 - rho) * var[c];
        }
    } else {
        mean.copy_from_slice(&state.running_mean);
        var.copy_from_slice(&state.running_var);
    }

    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| 1.0 / (v + state.epsilon).sqrt())
        .collect();
    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    {
        let xh = x_hat.data_mut();
        let yd = y.data_mut();
        for c in 0..channels {
            let (m, is) = (mean[c], inv_std[c]);
            let (g, bsh) = (state.scale[c], state.shift[c]);
            for b in 0..batch {
                for s in 0..spatial {
                    let i = channel_index(rank2, b, c, s, channels, spatial);
                    let xn = (xd[i] - m) * is;
                    xh[i] = xn;
                    yd[i] = g * xn + bsh;
                }
            }
        }
    }
    Ok((
        y,
        BnCache {
            x_hat,
            inv_std,
            from_batch: train,
        },
    ))
}

/// Backward pass for [`batchnorm_forward`]. Returns `(gx, grad_scale,
/// grad_shift)` with parameter gradients summed over the batch. When the
/// cache came from a training pass, `gx` includes the terms coupling every
/// example through the shared batch mean and variance.
pub fn batchnorm_backward(
    gy: &Tensor,
    cache: &BnCache,
    state: &BatchNormState,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if gy.shape() != cache.x_hat.shape() {
        return Err(Error::dim(format!(
            "gradient shape {:?} != cached shape {:?}",
            gy.shape(),
            cache.x_hat.shape()
        )));
    }
    let channels = state.channels();
    let (batch, spatial, _) = channel_slices(gy.shape(), channels)?;
    let rank2 = gy.shape().len() == 2;
    let count = (batch * spatial) as f64;
    let gyd = gy.data();
    let xh = cache.x_hat.data();

    let mut grad_scale = vec![0.0; channels];
    let mut grad_shift = vec![0.0; channels];
    let mut gx = Tensor::zeros(gy.shape());
    let gxd = gx.data_mut();
    for c in 0..channels {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..batch {
            for s in 0..spatial {
                let i = channel_index(rank2, b, c, s, channels, spatial);
                sum_g += gyd[i];
                sum_gx += gyd[i] * xh[i];
            }
        }
        grad_shift[c] = sum_g;
        grad_scale[c] = sum_gx;
        let k = state.scale[c] * cache.inv_std[c];
        if cache.from_batch {
            for b in 0..batch {
                for s in 0..spatial {
                    let i = channel_index(rank2, b, c, s, channels, spatial);
                    gxd[i] = k * (gyd[i] - sum_g / count - xh[i] * sum_gx / count);
                }
            }
        } else {
            for b in 0..batch {
                for s in 0..spatial {
                    let i = channel_index(rank2, b, c, s, channels, spatial);
                    gxd[i] = k * gyd[i];
                }
            }
        }
    }
    Ok((gx, grad_scale, grad_shift))
}
