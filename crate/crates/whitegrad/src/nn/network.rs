//! Layer sequencing, caching and shape validation.

use super::activation::{activation_backward, activation_forward, ActKind};
use super::batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormState, BnCache};
use super::conv::{conv_backward, conv_forward};
use super::linear::{linear_backward, linear_forward};
use super::pool::{maxpool_backward, maxpool_forward, PoolCache};
use super::LayerParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A dense or convolution layer with its activation caches and gradients.
/// After `forward` the layer holds its input; after `backward` it also holds
/// the gradient at its (pre-activation) output and the parameter gradients.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub name: String,
    pub params: LayerParams,
    pub x: Option<Tensor>,
    pub gy: Option<Tensor>,
    pub grad_w: Option<Tensor>,
    pub grad_b: Option<Tensor>,
}

impl AffineLayer {
    pub fn new(name: impl Into<String>, params: LayerParams) -> Self {
        AffineLayer {
            name: name.into(),
            params,
            x: None,
            gy: None,
            grad_w: None,
            grad_b: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormLayer {
    pub name: String,
    pub state: BatchNormState,
    pub cache: Option<BnCache>,
    pub grad_scale: Option<Vec<f64>>,
    pub grad_shift: Option<Vec<f64>>,
}

impl NormLayer {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        NormLayer {
            name: name.into(),
            state: BatchNormState::new(channels),
            cache: None,
            grad_scale: None,
            grad_shift: None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Affine(AffineLayer),
    Act {
        kind: ActKind,
        x: Option<Tensor>,
    },
    Pool {
        window: usize,
        cache: Option<PoolCache>,
    },
    Norm(NormLayer),
    Flatten {
        in_shape: Option<Vec<usize>>,
    },
}

impl Layer {
    pub fn act(kind: ActKind) -> Self {
        Layer::Act { kind, x: None }
    }

    pub fn pool(window: usize) -> Self {
        Layer::Pool {
            window,
            cache: None,
        }
    }

    pub fn flatten() -> Self {
        Layer::Flatten { in_shape: None }
    }
}

/// A feedforward stack. The loss layer is not part of the network; training
/// code computes it from the final output and passes its gradient to
/// [`Network::backward`].
#[derive(Debug, Clone)]
pub struct Network {
    /// Per-example input shape, e.g. `[3, 32, 32]` or `[n]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Builds the network and validates that shapes propagate.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let net = Network {
            input_shape,
            layers,
        };
        net.shapes()?;
        Ok(net)
    }

    /// Per-example shape after each layer, starting with the input shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = vec![shape.clone()];
        for (li, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                Layer::Affine(a) => {
                    a.params.check_invariants()?;
                    if a.params.is_conv() {
                        let [c, h, w] = shape[..] else {
                            return Err(Error::dim(format!(
                                "layer {li} ({}) expects [c, H, W], got {shape:?}",
                                a.name
                            )));
                        };
                        let (k1, k2) = a.params.kernel;
                        if c != a.params.in_channels || h < k1 || w < k2 {
                            return Err(Error::dim(format!(
                                "layer {li} ({}) cannot consume {shape:?}",
                                a.name
                            )));
                        }
                        let (ho, wo) = (h - k1 + 1, w - k2 + 1);
                        if a.params.sharing != ho * wo {
                            return Err(Error::State(format!(
                                "layer {li} ({}) sharing {} != {ho}x{wo}",
                                a.name, a.params.sharing
                            )));
                        }
                        vec![a.params.fanout, ho, wo]
                    } else {
                        if shape != [a.params.in_channels] {
                            return Err(Error::dim(format!(
                                "layer {li} ({}) expects [{}], got {shape:?}",
                                a.name, a.params.in_channels
                            )));
                        }
                        vec![a.params.fanout]
                    }
                }
                Layer::Act { .. } => shape,
                Layer::Pool { window, .. } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::dim(format!(
                            "layer {li} (pool) expects [c, H, W], got {shape:?}"
                        )));
                    };
                    if *window == 0 || h % window != 0 || w % window != 0 {
                        return Err(Error::dim(format!(
                            "layer {li} (pool) window {window} does not divide {h}x{w}"
                        )));
                    }
                    vec![c, h / window, w / window]
                }
                Layer::Norm(n) => {
                    let channels = match shape[..] {
                        [f] => f,
                        [c, _, _] => c,
                        _ => {
                            return Err(Error::dim(format!(
                                "layer {li} ({}) expects rank 1 or 3, got {shape:?}",
                                n.name
                            )))
                        }
                    };
                    if channels != n.state.channels() {
                        return Err(Error::dim(format!(
                            "layer {li} ({}) has {} channels, input has {channels}",
                            n.name,
                            n.state.channels()
                        )));
                    }
                    shape
                }
                Layer::Flatten { .. } => {
                    vec![shape.iter().product()]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.last().unwrap().clone())
    }

    /// He-style init: weights `N(0, 2/fanin)`, biases zero. Deterministic for
    /// a given generator state and layer order.
    pub fn init_params<R: Rng>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            if let Layer::Affine(a) = layer {
                let std = (2.0 / a.params.fanin() as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("std is finite");
                for w in a.params.weights.data_mut() {
                    *w = dist.sample(rng);
                }
                a.params.bias.data_mut().fill(0.0);
            }
        }
    }

    /// Runs the batch through every layer, caching what backward will need.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.shape().len() < 2 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "batch shape {:?} does not extend input shape {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = match layer {
                Layer::Affine(a) => {
                    let y = if a.params.is_conv() {
                        conv_forward(&cur, &a.params)?
                    } else {
                        linear_forward(&cur, &a.params)?
                    };
                    a.x = Some(cur);
                    y
                }
                Layer::Act { kind, x } => {
                    let y = activation_forward(&cur, *kind);
                    *x = Some(cur);
                    y
                }
                Layer::Pool { window, cache } => {
                    let (y, c) = maxpool_forward(&cur, *window)?;
                    *cache = Some(c);
                    y
                }
                Layer::Norm(n) => {
                    let (y, c) = batchnorm_forward(&cur, &mut n.state, mode == Mode::Train)?;
                    n.cache = Some(c);
                    y
                }
                Layer::Flatten { in_shape } => {
                    *in_shape = Some(cur.shape().to_vec());
                    let batch = cur.shape()[0];
                    let flat: usize = cur.shape()[1..].iter().product();
                    cur.reshaped(&[batch, flat])?
                }
            };
        }
        Ok(cur)
    }

    /// Backpropagates `grad_out` (gradient at the network output) through all
    /// layers, filling each trainable layer's gradients and cached output
    /// gradient. Requires a preceding [`Network::forward`] on the same batch.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = match layer {
                Layer::Affine(a) => {
                    let x = a.x.as_ref().ok_or_else(|| {
                        Error::State(format!("backward before forward on layer {}", a.name))
                    })?;
                    let (gx, gw, gb) = if a.params.is_conv() {
                        conv_backward(&g, x, &a.params)?
                    } else {
                        linear_backward(&g, x, &a.params)?
                    };
                    a.gy = Some(g);
                    a.grad_w = Some(gw);
                    a.grad_b = Some(gb);
                    gx
                }
                Layer::Act { kind, x } => {
                    let x = x
                        .as_ref()
                        .ok_or_else(|| Error::State("backward before forward".into()))?;
                    activation_backward(&g, x, *kind)?
                }
                Layer::Pool { cache, .. } => {
                    let c = cache
                        .as_ref()
                        .ok_or_else(|| Error::State("backward before forward".into()))?;
                    maxpool_backward(&g, c)?
                }
                Layer::Norm(n) => {
                    let c = n.cache.as_ref().ok_or_else(|| {
                        Error::State(format!("backward before forward on layer {}", n.name))
                    })?;
                    let (gx, gs, gb) = batchnorm_backward(&g, c, &n.state)?;
                    n.grad_scale = Some(gs);
                    n.grad_shift = Some(gb);
                    gx
                }
                Layer::Flatten { in_shape } => {
                    let shape = in_shape
                        .as_ref()
                        .ok_or_else(|| Error::State("backward before forward".into()))?;
                    g.reshaped(shape)?
                }
            };
        }
        Ok(g)
    }

    /// Fraction of relu units that were inactive for every example of the
    /// last cached forward pass, one entry per relu layer in order.
    pub fn relu_death_fractions(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::Act {
                kind: ActKind::Relu,
                x: Some(x),
            } = layer
            {
                let batch = x.shape()[0];
                let per = x.len() / batch;
                let mut dead = 0usize;
                for u in 0..per {
                    if (0..batch).all(|b| x.data()[b * per + u] <= 0.0) {
                        dead += 1;
                    }
                }
                out.push(dead as f64 / per as f64);
            }
        }
        out
    }

    /// True when every parameter (not cache) is finite.
    pub fn params_finite(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::Affine(a) => a.params.weights.all_finite() && a.params.bias.all_finite(),
            Layer::Norm(n) => {
                n.state.scale.iter().all(|v| v.is_finite())
                    && n.state.shift.iter().all(|v| v.is_finite())
                    && n.state.running_mean.iter().all(|v| v.is_finite())
                    && n.state.running_var.iter().all(|v| v.is_finite())
            }
            _ => true,
        })
    }

    /// Named parameter arrays in a stable order, for checkpointing.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Affine(a) => {
                    out.push((
                        format!("{}.w", a.name),
                        a.params.weights.shape().to_vec(),
                        a.params.weights.data().to_vec(),
                    ));
                    out.push((
                        format!("{}.b", a.name),
                        a.params.bias.shape().to_vec(),
                        a.params.bias.data().to_vec(),
                    ));
                }
                Layer::Norm(n) => {
                    let c = n.state.channels();
                    out.push((format!("{}.scale", n.name), vec![c], n.state.scale.clone()));
                    out.push((format!("{}.shift", n.name), vec![c], n.state.shift.clone()));
                    out.push((
                        format!("{}.running_mean", n.name),
                        vec![c],
                        n.state.running_mean.clone(),
                    ));
                    out.push((
                        format!("{}.running_var", n.name),
                        vec![c],
                        n.state.running_var.clone(),
                    ));
                }
                _ => {}
            }
        }
        out
    }

    /// Restores arrays captured by [`Network::named_arrays`]. Every named
    /// array must match an existing parameter in name and shape.
    pub fn load_named_arrays(&mut self, arrays: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for (name, shape, data) in arrays {
            let mut found = false;
            for layer in &mut self.layers {
                match layer {
                    Layer::Affine(a) => {
                        let target = if *name == format!("{}.w", a.name) {
                            Some(&mut a.params.weights)
                        } else if *name == format!("{}.b", a.name) {
                            Some(&mut a.params.bias)
                        } else {
                            None
                        };
                        if let Some(t) = target {
                            if t.shape() != shape.as_slice() || t.len() != data.len() {
                                return Err(Error::Format(format!(
                                    "array {name} has shape {shape:?}, expected {:?}",
                                    t.shape()
                                )));
                            }
                            t.data_mut().copy_from_slice(data);
                            found = true;
                        }
                    }
                    Layer::Norm(n) => {
                        let target = if *name == format!("{}.scale", n.name) {
                            Some(&mut n.state.scale)
                        } else if *name == format!("{}.shift", n.name) {
                            Some(&mut n.state.shift)
                        } else if *name == format!("{}.running_mean", n.name) {
                            Some(&mut n.state.running_mean)
                        } else if *name == format!("{}.running_var", n.name) {
                            Some(&mut n.state.running_var)
                        } else {
                            None
                        };
                        if let Some(t) = target {
                            if t.len() != data.len() || shape != &vec![t.len()] {
                                return Err(Error::Format(format!("array {name} has wrong shape")));
                            }
                            t.copy_from_slice(data);
                            found = true;
                        }
                    }
                    _ => {}
                }
                if found {
                    break;
                }
            }
            if !found {
                return Err(Error::Format(format!("no parameter named {name}")));
            }
        }
        Ok(())
    }
}
