//! Valid (unpadded, stride 1) convolution kernels.

use super::LayerParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn conv_geometry(x: &Tensor, params: &LayerParams) -> Result<(usize, usize, usize, usize, usize)> {
    let [batch, c, h, w] = *x.shape() else {
        return Err(Error::dim(format!(
            "expected [B, c, H, W] input, got {:?}",
            x.shape()
        )));
    };
    if c != params.in_channels {
        return Err(Error::dim(format!(
            "input channels {c} != configured {}",
            params.in_channels
        )));
    }
    let (k1, k2) = params.kernel;
    if h < k1 || w < k2 {
        return Err(Error::dim(format!(
            "input {h}x{w} smaller than kernel {k1}x{k2}"
        )));
    }
    let (ho, wo) = (h - k1 + 1, w - k2 + 1);
    if params.sharing != ho * wo {
        return Err(Error::State(format!(
            "sharing count {} does not match {ho}x{wo} kernel applications",
            params.sharing
        )));
    }
    Ok((batch, h, w, ho, wo))
}

/// `y[b,o,p,q] = bias[o] + sum_{c,u,v} w[o,c,u,v] x[b,c,p+u,q+v]`.
///
/// Output shape `[B, m, H-k1+1, W-k2+1]`; every kernel application shares one
/// weight set, so `params.sharing` must equal the number of output positions.
pub fn conv_forward(x: &Tensor, params: &LayerParams) -> Result<Tensor> {
    params.check_invariants()?;
    if !params.is_conv() {
        return Err(Error::State("conv_forward called with dense params".into()));
    }
    let (batch, h, w, ho, wo) = conv_geometry(x, params)?;
    let (c, m) = (params.in_channels, params.fanout);
    let (k1, k2) = params.kernel;
    let wd = params.weights.data();
    let bias = params.bias.data();
    let xd = x.data();
    let mut y = Tensor::zeros(&[batch, m, ho, wo]);
    let yd = y.data_mut();
    for b in 0..batch {
        let xb = &xd[b * c * h * w..(b + 1) * c * h * w];
        let yb = &mut yd[b * m * ho * wo..(b + 1) * m * ho * wo];
        for o in 0..m {
            let wob = &wd[o * c * k1 * k2..(o + 1) * c * k1 * k2];
            let yo = &mut yb[o * ho * wo..(o + 1) * ho * wo];
            yo.fill(bias[o]);
            for ci in 0..c {
                let xc = &xb[ci * h * w..(ci + 1) * h * w];
                let wc = &wob[ci * k1 * k2..(ci + 1) * k1 * k2];
                for p in 0..ho {
                    for u in 0..k1 {
                        let xrow = &xc[(p + u) * w..(p + u) * w + w];
                        let wrow = &wc[u * k2..u * k2 + k2];
                        let yrow = &mut yo[p * wo..p * wo + wo];
                        for v in 0..k2 {
                            let wk = wrow[v];
                            for q in 0..wo {
                                yrow[q] += wk * xrow[q + v];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Backward pass for [`conv_forward`]. Parameter gradients are summed over
/// the batch and over all kernel applications.
pub fn conv_backward(
    gy: &Tensor,
    x: &Tensor,
    params: &LayerParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    params.check_invariants()?;
    let (batch, h, w, ho, wo) = conv_geometry(x, params)?;
    let (c, m) = (params.in_channels, params.fanout);
    let (k1, k2) = params.kernel;
    if gy.shape() != [batch, m, ho, wo] {
        return Err(Error::dim(format!(
            "gradient shape {:?} != expected [{batch}, {m}, {ho}, {wo}]",
            gy.shape()
        )));
    }
    let wd = params.weights.data();
    let xd = x.data();
    let gyd = gy.data();
    let mut gx = Tensor::zeros(&[batch, c, h, w]);
    let mut grad_w = Tensor::zeros(&[m, c, k1, k2]);
    let mut grad_b = Tensor::zeros(&[m]);
    {
        let gxd = gx.data_mut();
        let gwd = grad_w.data_mut();
        let gbd = grad_b.data_mut();
        for b in 0..batch {
            let xb = &xd[b * c * h * w..(b + 1) * c * h * w];
            let gyb = &gyd[b * m * ho * wo..(b + 1) * m * ho * wo];
            let gxb = &mut gxd[b * c * h * w..(b + 1) * c * h * w];
            for o in 0..m {
                let gyo = &gyb[o * ho * wo..(o + 1) * ho * wo];
                gbd[o] += gyo.iter().sum::<f64>();
                let wob = &wd[o * c * k1 * k2..(o + 1) * c * k1 * k2];
                let gwob = &mut gwd[o * c * k1 * k2..(o + 1) * c * k1 * k2];
                for ci in 0..c {
                    let xc = &xb[ci * h * w..(ci + 1) * h * w];
                    let wc = &wob[ci * k1 * k2..(ci + 1) * k1 * k2];
                    let gwc = &mut gwob[ci * k1 * k2..(ci + 1) * k1 * k2];
                    let gxc = &mut gxb[ci * h * w..(ci + 1) * h * w];
                    for p in 0..ho {
                        let gyrow = &gyo[p * wo..p * wo + wo];
                        for u in 0..k1 {
                            let xrow = &xc[(p + u) * w..(p + u) * w + w];
                            let gxrow = &mut gxc[(p + u) * w..(p + u) * w + w];
                            let wrow = &wc[u * k2..u * k2 + k2];
                            let gwrow = &mut gwc[u * k2..u * k2 + k2];
                            for v in 0..k2 {
                                let wk = wrow[v];
                                let mut acc = 0.0;
                                for q in 0..wo {
                                    let g = gyrow[q];
                                    acc += g * xrow[q + v];
                                    gxrow[q + v] += g * wk;
                                }
                                gwrow[v] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, grad_w, grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, fd_check_layer, random_params, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_kernel_with_ones_sums_channels() {
        let mut p = random_params(
            &mut ChaCha8Rng::seed_from_u64(0),
            LayerParams::conv(3, 1, 1, 1, 16),
        );
        p.weights.data_mut().fill(1.0);
        p.bias.data_mut().fill(0.0);
        let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[2, 3, 4, 4]);
        let y = conv_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[2, 1, 4, 4]);
        for b in 0..2 {
            for pos in 0..16 {
                let want: f64 = (0..3).map(|c| x.data()[b * 48 + c * 16 + pos]).sum();
                assert_close(y.data()[b * 16 + pos], want, 1e-15);
            }
        }
    }

    #[test]
    fn constant_field_response() {
        // All-ones 2x2 kernel over a constant field c gives 4c everywhere.
        let mut p = LayerParams::conv(1, 1, 2, 2, 9);
        p.weights.data_mut().fill(1.0);
        let x = Tensor::filled(&[1, 1, 4, 4], 0.75);
        let y = conv_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        for &v in y.data() {
            assert_close(v, 3.0, 1e-15);
        }
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, LayerParams::conv(2, 3, 3, 2, 4 * 5));
        let x = random_tensor(&mut rng, &[2, 2, 6, 6]);
        let y = conv_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 5]);
        for b in 0..2 {
            for o in 0..3 {
                for pp in 0..4 {
                    for q in 0..5 {
                        let mut want = p.bias.data()[o];
                        for c in 0..2 {
                            for u in 0..3 {
                                for v in 0..2 {
                                    let wi = ((o * 2 + c) * 3 + u) * 2 + v;
                                    let xi = ((b * 2 + c) * 6 + pp + u) * 6 + q + v;
                                    want += p.weights.data()[wi] * x.data()[xi];
                                }
                            }
                        }
                        let yi = ((b * 3 + o) * 4 + pp) * 5 + q;
                        assert_close(y.data()[yi], want, 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn single_spike_gradient_copies_input_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, LayerParams::conv(2, 2, 2, 2, 9));
        let x = random_tensor(&mut rng, &[1, 2, 4, 4]);
        let mut gy = Tensor::zeros(&[1, 2, 3, 3]);
        // Spike at output channel 1, position (2, 1).
        let (co, row, col) = (1, 2, 1);
        gy.data_mut()[(co * 3 + row) * 3 + col] = 1.0;
        let (_, gw, gb) = conv_backward(&gy, &x, &p).unwrap();
        assert_eq!(gb.data(), &[0.0, 1.0]);
        for c in 0..2 {
            for u in 0..2 {
                for v in 0..2 {
                    let want = x.data()[(c * 4 + row + u) * 4 + col + v];
                    let got = gw.data()[((co * 2 + c) * 2 + u) * 2 + v];
                    assert_close(got, want, 1e-15);
                }
            }
        }
        // Channel 0 kernel saw no gradient.
        assert!(gw.data()[..8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, LayerParams::conv(2, 3, 3, 3, 3 * 3));
        let x = random_tensor(&mut rng, &[2, 2, 5, 5]);
        fd_check_layer(&mut rng, &p, &x, conv_forward, conv_backward, 1e-6);
    }

    #[test]
    fn sharing_count_must_match_geometry() {
        let p = LayerParams::conv(1, 1, 2, 2, 4);
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        // 4x4 input with a 2x2 kernel has 9 applications, not 4.
        assert!(conv_forward(&x, &p).is_err());
    }
}
