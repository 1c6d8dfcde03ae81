//! A minimal deterministic feedforward engine.
//!
//! Forward and backward passes for dense, convolution, pooling, activation,
//! batch-normalization and softmax cross-entropy layers, written directly
//! against [`Tensor`](crate::tensor::Tensor) buffers. Single-threaded with a
//! fixed reduction order, so identical inputs produce bit-identical outputs.
//!
//! Each layer kernel is a pure free function; [`Network`] composes them and
//! owns the activation caches a backward pass needs. The backward kernels are
//! validated against central finite differences in the test suites.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod network;
pub mod pool;
pub mod softmax;

pub use activation::{activation_backward, activation_forward, ActKind};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormState, BnCache};
pub use conv::{conv_backward, conv_forward};
pub use linear::{linear_backward, linear_forward};
pub use network::{Layer, Mode, Network};
pub use pool::{maxpool_backward, maxpool_forward, PoolCache};
pub use softmax::softmax_xent;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights and bias of one trainable layer, together with the geometry the
/// update rules need: the fanin, the fanout, and the sharing count (how many
/// times each weight is applied per example; 1 for a dense layer, number of
/// kernel applications for a convolution).
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// `[m, n]` for dense, `[m, c, k1, k2]` for convolution.
    pub weights: Tensor,
    /// `[m]`.
    pub bias: Tensor,
    /// Input channels: `n` for dense, `c` for convolution.
    pub in_channels: usize,
    /// Output units/channels `m`.
    pub fanout: usize,
    /// Kernel extents; `(1, 1)` for dense layers.
    pub kernel: (usize, usize),
    /// Weight sharing count `S`. Dense layers have `S = 1`; a convolution
    /// applied on an `H x W` input has `S = (H-k1+1) * (W-k2+1)`.
    pub sharing: usize,
}

impl LayerParams {
    pub fn dense(n: usize, m: usize) -> Self {
        LayerParams {
            weights: Tensor::zeros(&[m, n]),
            bias: Tensor::zeros(&[m]),
            in_channels: n,
            fanout: m,
            kernel: (1, 1),
            sharing: 1,
        }
    }

    /// Convolution parameters. `sharing` is fixed by the input geometry the
    /// layer will run on and must equal the number of kernel applications.
    pub fn conv(c: usize, m: usize, k1: usize, k2: usize, sharing: usize) -> Self {
        LayerParams {
            weights: Tensor::zeros(&[m, c, k1, k2]),
            bias: Tensor::zeros(&[m]),
            in_channels: c,
            fanout: m,
            kernel: (k1, k2),
            sharing,
        }
    }

    pub fn is_conv(&self) -> bool {
        self.kernel != (1, 1) || self.weights.shape().len() == 4
    }

    /// Number of incoming connections per output unit: `n` for dense layers,
    /// `c * k1 * k2` for convolutions.
    pub fn fanin(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub(crate) fn check_invariants(&self) -> Result<()> {
        if self.sharing < 1 {
            return Err(Error::State("sharing count must be >= 1".into()));
        }
        if !self.is_conv() && self.sharing != 1 {
            return Err(Error::State("dense layer must have sharing == 1".into()));
        }
        let wshape = self.weights.shape();
        let consistent = if self.is_conv() {
            wshape == [self.fanout, self.in_channels, self.kernel.0, self.kernel.1]
        } else {
            wshape == [self.fanout, self.in_channels]
        };
        if !consistent || self.bias.shape() != [self.fanout] {
            return Err(Error::dim(format!(
                "parameter shapes {:?}/{:?} inconsistent with fanin {} fanout {}",
                wshape,
                self.bias.shape(),
                self.fanin(),
                self.fanout
            )));
        }
        Ok(())
    }
}
