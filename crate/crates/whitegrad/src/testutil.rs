//! Helpers shared by the unit test suites.

use crate::error::Result;
use crate::nn::LayerParams;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} != {b} (tol {tol})");
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    t
}

/// Fills a parameter template with standard normal entries scaled to keep
/// activations O(1).
pub fn random_params<R: Rng>(rng: &mut R, mut p: LayerParams) -> LayerParams {
    let scale = 1.0 / (p.fanin() as f64).sqrt();
    for v in p.weights.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * scale;
    }
    for v in p.bias.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = 0.1 * z;
    }
    p
}

/// Checks a layer backward pass against central finite differences of the
/// scalar probe `sum(c * forward(x, p))` for a fixed random coefficient
/// tensor `c`. Verifies the input gradient and both parameter gradients at
/// relative error `tol`.
pub fn fd_check_layer<R, F, B>(
    rng: &mut R,
    params: &LayerParams,
    x: &Tensor,
    fwd: F,
    bwd: B,
    tol: f64,
) where
    R: Rng,
    F: Fn(&Tensor, &LayerParams) -> Result<Tensor>,
    B: Fn(&Tensor, &Tensor, &LayerParams) -> Result<(Tensor, Tensor, Tensor)>,
{
    let y = fwd(x, params).expect("forward");
    let coeffs = random_tensor(rng, y.shape());
    let loss = |x: &Tensor, p: &LayerParams| -> f64 {
        let y = fwd(x, p).expect("forward");
        y.data().iter().zip(coeffs.data()).map(|(a, b)| a * b).sum()
    };

    let (gx, gw, gb) = bwd(&coeffs, x, params).expect("backward");

    let h = 1e-5;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let fd = (loss(&xp, params) - loss(&xm, params)) / (2.0 * h);
        let r = rel_err(gx.data()[i], fd);
        assert!(
            r <= tol,
            "gx[{i}]: analytic {} fd {fd} rel {r}",
            gx.data()[i]
        );
    }
    for i in 0..params.weights.len() {
        let mut pp = params.clone();
        let mut pm = params.clone();
        pp.weights.data_mut()[i] += h;
        pm.weights.data_mut()[i] -= h;
        let fd = (loss(x, &pp) - loss(x, &pm)) / (2.0 * h);
        let r = rel_err(gw.data()[i], fd);
        assert!(
            r <= tol,
            "gw[{i}]: analytic {} fd {fd} rel {r}",
            gw.data()[i]
        );
    }
    for i in 0..params.bias.len() {
        let mut pp = params.clone();
        let mut pm = params.clone();
        pp.bias.data_mut()[i] += h;
        pm.bias.data_mut()[i] -= h;
        let fd = (loss(x, &pp) - loss(x, &pm)) / (2.0 * h);
        let r = rel_err(gb.data()[i], fd);
        assert!(
            r <= tol,
            "gb[{i}]: analytic {} fd {fd} rel {r}",
            gb.data()[i]
        );
    }
}
