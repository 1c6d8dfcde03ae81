//! Trust-region stepsizes and their cheap per-scalar descendant.
//!
//! All of these scale a preconditioned gradient so the step has a fixed
//! length in the metric of the preconditioner: for a curvature matrix `G`,
//!
//! ```text
//! step = eta * (G^-1 grad) / sqrt(grad' G^-1 grad)
//! ```
//!
//! has `G`-norm exactly `eta` whenever the quadratic form is nonzero.
//! Functions here return the *positive* normalized step; descent subtracts
//! it. The one exception is [`RmsState::rmsprop_step`], which returns the
//! signed update ready to add, matching how that rule is usually written.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quadratic forms are floored here before the square root, so dead
/// gradients produce a zero step instead of NaN.
pub const QUAD_FLOOR: f64 = 1e-30;

/// Stepsize knobs shared by the trust-region style rules: `eta` is the step
/// length in the preconditioner metric, `mu` regularizes the denominator of
/// the averaged variants.
#[derive(Debug, Clone, Copy)]
pub struct TrustRegionConfig {
    pub eta: f64,
    pub mu: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        TrustRegionConfig {
            eta: 0.01,
            mu: 1e-8,
        }
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Numeric(format!("{name} is not finite: {v}")));
    }
    Ok(())
}

/// One global trust-region step. `ginv_grad` must be the gradient already
/// multiplied by the inverse preconditioner; the quadratic form
/// `grad . ginv_grad` is floored at [`QUAD_FLOOR`].
pub fn global_trust_step(grad: &[f64], ginv_grad: &[f64], eta: f64) -> Result<Vec<f64>> {
    if grad.len() != ginv_grad.len() || grad.is_empty() {
        return Err(Error::dim(format!(
            "gradient lengths differ or empty: {} vs {}",
            grad.len(),
            ginv_grad.len()
        )));
    }
    check_finite("eta", eta)?;
    let mut quad = 0.0;
    for (g, gg) in grad.iter().zip(ginv_grad) {
        quad += g * gg;
    }
    if quad < 0.0 {
        return Err(Error::Numeric(format!(
            "quadratic form {quad} is negative; preconditioner is not positive definite"
        )));
    }
    let denom = quad.max(QUAD_FLOOR).sqrt();
    Ok(ginv_grad.iter().map(|&v| eta * v / denom).collect())
}

/// Per-block trust region: each `(grad, ginv_grad)` pair is normalized
/// independently, so every block moves `eta` in its own metric regardless of
/// how gradient magnitude is distributed across blocks.
pub fn block_trust_step(blocks: &[(&[f64], &[f64])], eta: f64) -> Result<Vec<Vec<f64>>> {
    blocks
        .iter()
        .map(|(g, gg)| global_trust_step(g, gg, eta))
        .collect()
}

/// Averaged, regularized block step: the denominator uses the batch mean of
/// per-example quadratic forms `grad_b . G^-1 grad_b` plus `mu`, rather than
/// the quadratic form of the averaged gradient. With one example and
/// `mu = 0` this reduces to [`global_trust_step`].
pub fn regularized_block_step(
    ginv_grad: &[f64],
    per_example_quads: &[f64],
    eta: f64,
    mu: f64,
) -> Result<Vec<f64>> {
    if ginv_grad.is_empty() || per_example_quads.is_empty() {
        return Err(Error::dim("empty gradient or quadratic forms".to_string()));
    }
    check_finite("eta", eta)?;
    check_finite("mu", mu)?;
    if mu < 0.0 {
        return Err(Error::Numeric(format!("mu must be >= 0, got {mu}")));
    }
    let mut mean_q = 0.0;
    for &q in per_example_quads {
        if q < 0.0 {
            return Err(Error::Numeric(format!(
                "negative per-example quadratic form {q}"
            )));
        }
        mean_q += q;
    }
    mean_q /= per_example_quads.len() as f64;
    let denom = (mu + mean_q).max(QUAD_FLOOR).sqrt();
    Ok(ginv_grad.iter().map(|&v| eta * v / denom).collect())
}

/// Per-scalar gradient second-moment tracker. This is the regularized block
/// rule shrunk to one-dimensional blocks with an identity preconditioner and
/// an exponential average standing in for the batch mean.
#[derive(Debug, Clone)]
pub struct RmsState {
    pub r: Vec<f64>,
    /// Weight of the *new* squared gradient: `r <- (1 - lambda) r + lambda g^2`.
    pub lambda: f64,
}

impl RmsState {
    pub fn new(len: usize, lambda: f64) -> Self {
        RmsState {
            r: vec![0.0; len],
            lambda,
        }
    }

    /// Updates the second moments, then returns the signed update
    /// `-eta * g / sqrt(mu + r)`, ready to add to the parameters.
    pub fn rmsprop_step(&mut self, grad: &[f64], eta: f64, mu: f64) -> Result<Vec<f64>> {
        if grad.len() != self.r.len() {
            return Err(Error::dim(format!(
                "gradient length {} != state length {}",
                grad.len(),
                self.r.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::State(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        check_finite("eta", eta)?;
        if mu < 0.0 {
            return Err(Error::Numeric(format!("mu must be >= 0, got {mu}")));
        }
        let lam = self.lambda;
        let mut out = Vec::with_capacity(grad.len());
        for (r, &g) in self.r.iter_mut().zip(grad) {
            *r = (1.0 - lam) * *r + lam * g * g;
            let denom = (mu + *r).max(QUAD_FLOOR).sqrt();
            out.push(-eta * g / denom);
        }
        Ok(out)
    }
}

/// Geometry-only stepsize scale for a layer with `fanin` inputs per unit and
/// `sharing` kernel applications: `1 / sqrt(fanin * sharing)`.
pub fn fanin_scale(fanin: usize, sharing: usize) -> Result<f64> {
    if fanin == 0 || sharing == 0 {
        return Err(Error::dim("fanin and sharing must be >= 1".to_string()));
    }
    Ok(1.0 / ((fanin * sharing) as f64).sqrt())
}

/// Estimates the effective stepsize denominator of one unit from data:
///
/// ```text
/// sqrt( mean_b[(sum_i x[b,i] * g[b])^2] / mean_b[g[b]^2] )
/// ```
///
/// For independent unit-variance inputs this concentrates on
/// `sqrt(fanin)`; for perfectly correlated inputs it grows to `fanin`
/// itself, which is what makes it worth measuring instead of assuming.
pub fn fanin_denominator_estimate(x: &Tensor, g: &[f64]) -> Result<f64> {
    let [batch, n] = *x.shape() else {
        return Err(Error::dim(format!(
            "expected [B, n] inputs, got {:?}",
            x.shape()
        )));
    };
    if g.len() != batch || batch == 0 || n == 0 {
        return Err(Error::dim(format!(
            "{} gradients for batch of {batch} with fanin {n}",
            g.len()
        )));
    }
    let xd = x.data();
    let mut num = 0.0;
    let mut den = 0.0;
    for b in 0..batch {
        let mut dot = 0.0;
        for i in 0..n {
            dot += xd[b * n + i];
        }
        let z = dot * g[b];
        num += z * z;
        den += g[b] * g[b];
    }
    if den <= 0.0 {
        return Err(Error::Estimation(
            "all gradients are zero; denominator undefined".into(),
        ));
    }
    Ok((num / den).sqrt())
}
