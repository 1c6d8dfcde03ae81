//! Non-overlapping max pooling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Positions selected by a pooling forward pass, needed for backward.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// Flat index into the input for each output element.
    pub argmax: Vec<usize>,
}

/// `k x k` max pooling with stride `k` over `[B, c, H, W]`. Both spatial
/// extents must be divisible by `k`. Ties select the first maximum in
/// row-major scan order.
pub fn maxpool_forward(x: &Tensor, k: usize) -> Result<(Tensor, PoolCache)> {
    let [batch, c, h, w] = *x.shape() else {
        return Err(Error::dim(format!(
            "expected [B, c, H, W] input, got {:?}",
            x.shape()
        )));
    };
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::dim(format!(
            "input {h}x{w} not divisible by pool window {k}"
        )));
    }
    let (ho, wo) = (h / k, w / k);
    let xd = x.data();
    let mut y = Tensor::zeros(&[batch, c, ho, wo]);
    let mut argmax = vec![0usize; y.len()];
    {
        let yd = y.data_mut();
        let mut oi = 0;
        for b in 0..batch {
            for ci in 0..c {
                let base = (b * c + ci) * h * w;
                for p in 0..ho {
                    for q in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for u in 0..k {
                            for v in 0..k {
                                let idx = base + (p * k + u) * w + q * k + v;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        yd[oi] = best;
                        argmax[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
    }
    let cache = PoolCache {
        in_shape: x.shape().to_vec(),
        out_shape: y.shape().to_vec(),
        argmax,
    };
    Ok((y, cache))
}

/// Routes each output gradient back to the input position that won the max.
pub fn maxpool_backward(gy: &Tensor, cache: &PoolCache) -> Result<Tensor> {
    if gy.shape() != cache.out_shape.as_slice() {
        return Err(Error::dim(format!(
            "gradient shape {:?} != pooled shape {:?}",
            gy.shape(),
            cache.out_shape
        )));
    }
    let mut gx = Tensor::zeros(&cache.in_shape);
    let gxd = gx.data_mut();
    for (g, &idx) in gy.data().iter().zip(&cache.argmax) {
        gxd[idx] += g;
    }
    Ok(gx)
}
