//! Dense layer kernels.

use super::LayerParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y[b,j] = sum_i w[j,i] x[b,i] + bias[j]` for a batch `x: [B, n]`.
pub fn linear_forward(x: &Tensor, params: &LayerParams) -> Result<Tensor> {
    params.check_invariants()?;
    if params.is_conv() {
        return Err(Error::State(
            "linear_forward called with conv params".into(),
        ));
    }
    let (n, m) = (params.in_channels, params.fanout);
    let [batch, xn] = *x.shape() else {
        return Err(Error::dim(format!(
            "expected [B, n] input, got {:?}",
            x.shape()
        )));
    };
    if xn != n {
        return Err(Error::dim(format!("input width {xn} != fanin {n}")));
    }
    let w = params.weights.data();
    let bias = params.bias.data();
    let xd = x.data();
    let mut y = Tensor::zeros(&[batch, m]);
    let yd = y.data_mut();
    for b in 0..batch {
        let xrow = &xd[b * n..(b + 1) * n];
        let yrow = &mut yd[b * m..(b + 1) * m];
        for j in 0..m {
            let wrow = &w[j * n..(j + 1) * n];
            let mut acc = bias[j];
            for i in 0..n {
                acc += wrow[i] * xrow[i];
            }
            yrow[j] = acc;
        }
    }
    Ok(y)
}

/// Backward pass for [`linear_forward`]. Returns `(gx, grad_w, grad_b)` where
/// the parameter gradients are summed over the batch:
/// `grad_w[j,i] = sum_b gy[b,j] x[b,i]`, `grad_b[j] = sum_b gy[b,j]`, and
/// `gx[b,i] = sum_j gy[b,j] w[j,i]`.
pub fn linear_backward(
    gy: &Tensor,
    x: &Tensor,
    params: &LayerParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    params.check_invariants()?;
    let (n, m) = (params.in_channels, params.fanout);
    let [batch, xn] = *x.shape() else {
        return Err(Error::dim(format!(
            "expected [B, n] input, got {:?}",
            x.shape()
        )));
    };
    if xn != n || gy.shape() != [batch, m] {
        return Err(Error::dim(format!(
            "gradient shape {:?} inconsistent with input {:?} and fanout {m}",
            gy.shape(),
            x.shape()
        )));
    }
    let w = params.weights.data();
    let xd = x.data();
    let gyd = gy.data();
    let mut gx = Tensor::zeros(&[batch, n]);
    let mut grad_w = Tensor::zeros(&[m, n]);
    let mut grad_b = Tensor::zeros(&[m]);
    {
        let gxd = gx.data_mut();
        let gwd = grad_w.data_mut();
        let gbd = grad_b.data_mut();
        for b in 0..batch {
            let xrow = &xd[b * n..(b + 1) * n];
            let grow = &gyd[b * m..(b + 1) * m];
            let gxrow = &mut gxd[b * n..(b + 1) * n];
            for j in 0..m {
                let g = grow[j];
                gbd[j] += g;
                let wrow = &w[j * n..(j + 1) * n];
                let gwrow = &mut gwd[j * n..(j + 1) * n];
                for i in 0..n {
                    gwrow[i] += g * xrow[i];
                    gxrow[i] += g * wrow[i];
                }
            }
        }
    }
    Ok((gx, grad_w, grad_b))
}
