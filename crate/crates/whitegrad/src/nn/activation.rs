//! Elementwise activations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Tanh,
}

/// Applies the activation elementwise; works on any shape.
pub fn activation_forward(x: &Tensor, kind: ActKind) -> Tensor {
    let mut y = x.clone();
    match kind {
        ActKind::Relu => {
            for v in y.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        ActKind::Tanh => {
            for v in y.data_mut() {
                *v = v.tanh();
            }
        }
    }
    y
}

/// Chain rule through the activation, evaluated at the forward input `x`.
/// The relu derivative at exactly zero is taken as zero.
pub fn activation_backward(gy: &Tensor, x: &Tensor, kind: ActKind) -> Result<Tensor> {
    if gy.shape() != x.shape() {
        return Err(Error::dim(format!(
            "gradient shape {:?} != input shape {:?}",
            gy.shape(),
            x.shape()
        )));
    }
    let mut gx = gy.clone();
    match kind {
        ActKind::Relu => {
            for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        ActKind::Tanh => {
            for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
                let t = v.tanh();
                *g *= 1.0 - t * t;
            }
        }
    }
    Ok(gx)
}
