//! Curvature blocks and the oracles that check them.
//!
//! The per-unit curvature of a layer, measured as the empirical Fisher of
//! the unit's affine parameters `[bias, w_1 .. w_n]`, factorizes (for
//! weakly coupled units) into a gradient second moment times input second
//! moments. [`approx_block`] is that factorized form; it is the exact
//! inverse of the preconditioner block in
//! [`block_matrix`](crate::reparam::block_matrix), which is the whole point:
//! preconditioning by the reparametrization is multiplying by an approximate
//! inverse curvature.
//!
//! Finite-difference helpers live here too, used across the test suites as
//! independent oracles for every hand-derived gradient.

use crate::error::{Error, Result};
use crate::reparam::ReparamConstants;
use crate::tensor::Tensor;

/// One unit's curvature matrix over `[bias, w_1 .. w_n]`.
#[derive(Debug, Clone)]
pub struct CurvatureBlock {
    pub unit: usize,
    pub matrix: Tensor,
}

/// Empirical Fisher block of unit `unit`: `mean_b g[b]^2 z[b] z[b]'` with
/// `z = [1, x]`. `g` must hold the unit's *per-example* output gradient in
/// unscaled units (no `1/B` from a batch-averaged loss).
pub fn empirical_fisher_block(x: &Tensor, g: &[f64], unit: usize) -> Result<CurvatureBlock> {
    let [batch, n] = *x.shape() else {
        return Err(Error::dim(format!(
            "expected [B, n] inputs, got {:?}",
            x.shape()
        )));
    };
    if g.len() != batch || batch == 0 {
        return Err(Error::dim(format!(
            "{} gradients for batch of {batch}",
            g.len()
        )));
    }
    let xd = x.data();
    let mut m = Tensor::zeros(&[n + 1, n + 1]);
    let md = m.data_mut();
    let mut z = vec![1.0; n + 1];
    for b in 0..batch {
        z[1..].copy_from_slice(&xd[b * n..(b + 1) * n]);
        let g2 = g[b] * g[b];
        for r in 0..n + 1 {
            let zr = g2 * z[r];
            for c in 0..n + 1 {
                md[r * (n + 1) + c] += zr * z[c];
            }
        }
    }
    let inv_b = 1.0 / batch as f64;
    for v in md.iter_mut() {
        *v *= inv_b;
    }
    Ok(CurvatureBlock { unit, matrix: m })
}

/// The factorized curvature block implied by a set of reparametrization
/// constants:
///
/// ```text
/// G = (1/beta2) * [[1,  mu'],
///                  [mu, mu mu' + diag(1/alpha2)]]
/// ```
///
/// Algebraically the exact inverse of the corresponding preconditioner
/// block, and equal to the empirical Fisher in expectation when inputs are
/// independent of the unit's gradient and of each other.
pub fn approx_block(c: &ReparamConstants, unit: usize) -> Result<CurvatureBlock> {
    if unit >= c.fanout() {
        return Err(Error::dim(format!(
            "unit {unit} out of range for fanout {}",
            c.fanout()
        )));
    }
    let n = c.fanin();
    let scale = 1.0 / c.beta2[unit];
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::State(format!(
            "beta2[{unit}] must be positive, got {}",
            c.beta2[unit]
        )));
    }
    let mut m = Tensor::zeros(&[n + 1, n + 1]);
    let md = m.data_mut();
    md[0] = scale;
    for i in 0..n {
        md[i + 1] = scale * c.mu[i];
        md[(i + 1) * (n + 1)] = scale * c.mu[i];
        for j in 0..n {
            let mut v = c.mu[i] * c.mu[j];
            if i == j {
                v += 1.0 / c.alpha2[i];
            }
            md[(i + 1) * (n + 1) + j + 1] = scale * v;
        }
    }
    Ok(CurvatureBlock { unit, matrix: m })
}

/// Central finite-difference gradient with per-coordinate step
/// `h * max(1, |w_i|)`.
pub fn finite_diff_gradient<F>(mut f: F, w: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = Vec::with_capacity(w.len());
    let mut probe = w.to_vec();
    for i in 0..w.len() {
        let hi = h * w[i].abs().max(1.0);
        probe[i] = w[i] + hi;
        let fp = f(&probe);
        probe[i] = w[i] - hi;
        let fm = f(&probe);
        probe[i] = w[i];
        out.push((fp - fm) / (2.0 * hi));
    }
    out
}

/// Central finite-difference Hessian with per-coordinate steps
/// `h * max(1, |w_i|)`. Symmetrized by construction.
pub fn finite_diff_hessian<F>(mut f: F, w: &[f64], h: f64) -> Tensor
where
    F: FnMut(&[f64]) -> f64,
{
    let d = w.len();
    let mut m = Tensor::zeros(&[d, d]);
    let mut probe = w.to_vec();
    let step = |i: usize| h * w[i].abs().max(1.0);
    let f0 = f(w);
    for i in 0..d {
        let hi = step(i);
        // Diagonal: second difference.
        probe[i] = w[i] + hi;
        let fp = f(&probe);
        probe[i] = w[i] - hi;
        let fm = f(&probe);
        probe[i] = w[i];
        m.set2(i, i, (fp - 2.0 * f0 + fm) / (hi * hi));
        for j in i + 1..d {
            let hj = step(j);
            let mut eval = |si: f64, sj: f64| {
                probe[i] = w[i] + si * hi;
                probe[j] = w[j] + sj * hj;
                let v = f(&probe);
                probe[i] = w[i];
                probe[j] = w[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * hi * hj);
            m.set2(i, j, v);
            m.set2(j, i, v);
        }
    }
    m
}

/// A two-parameter objective pairing a unit-curvature quadratic with a flat
/// logistic valley:
///
/// ```text
/// F(w) = w1^2 / 2 + ln(e^{w2} + e^{-w2})
/// ```
///
/// The gradient direction barely moves `w2` once `tanh` saturates, while a
/// curvature-scaled step crosses the valley in one move. Used throughout the
/// guide and tests as the smallest case where preconditioning visibly wins.
#[derive(Debug, Clone, Copy, Default)]
pub struct MotivatingExample;

/// The standard instance of the two-axis demo objective.
pub fn motivating_example() -> MotivatingExample {
    MotivatingExample
}

impl MotivatingExample {
    pub fn value(&self, w: &[f64; 2]) -> f64 {
        // ln(e^x + e^-x) = |x| + ln(1 + e^(-2|x|)), stable for large |x|.
        let a = w[1].abs();
        0.5 * w[0] * w[0] + a + (-2.0 * a).exp().ln_1p()
    }

    pub fn gradient(&self, w: &[f64; 2]) -> [f64; 2] {
        [w[0], w[1].tanh()]
    }

    /// Exact Hessian: `diag(1, sech^2 w2)`.
    pub fn hessian(&self, w: &[f64; 2]) -> [[f64; 2]; 2] {
        let c = w[1].cosh();
        [[1.0, 0.0], [0.0, 1.0 / (c * c)]]
    }

    /// `-H^-1 grad`, the full curvature-scaled descent direction.
    pub fn newton_direction(&self, w: &[f64; 2]) -> [f64; 2] {
        [-w[0], -(2.0 * w[1]).sinh() / 2.0]
    }

    /// One damped step `w + gamma * newton_direction(w)`.
    pub fn newton_step(&self, w: &[f64; 2], gamma: f64) -> [f64; 2] {
        let d = self.newton_direction(w);
        [w[0] + gamma * d[0], w[1] + gamma * d[1]]
    }
}

/// How much empirical-Fisher mass lives off the diagonal blocks of a chosen
/// partition, measured in squared Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockDiagonalityReport {
    pub within_mass: f64,
    pub cross_mass: f64,
}

impl BlockDiagonalityReport {
    /// Fraction of total mass outside the diagonal blocks, in `[0, 1]`.
    pub fn cross_fraction(&self) -> f64 {
        let total = self.within_mass + self.cross_mass;
        if total == 0.0 {
            0.0
        } else {
            self.cross_mass / total
        }
    }
}

/// Builds the empirical Fisher `mean_b grad_b grad_b'` of flattened
/// per-example gradients and partitions its squared Frobenius mass into the
/// diagonal blocks given by `block_sizes` (which must sum to the gradient
/// length) versus everything else.
pub fn block_diagonality_probe(
    per_example_grads: &[Vec<f64>],
    block_sizes: &[usize],
) -> Result<BlockDiagonalityReport> {
    let Some(first) = per_example_grads.first() else {
        return Err(Error::dim("no gradients given".to_string()));
    };
    let d = first.len();
    if block_sizes.iter().sum::<usize>() != d || block_sizes.contains(&0) {
        return Err(Error::dim(format!(
            "block sizes {block_sizes:?} do not partition gradient length {d}"
        )));
    }
    if per_example_grads.iter().any(|g| g.len() != d) {
        return Err(Error::dim("ragged gradient list".to_string()));
    }
    // block id per coordinate
    let mut block_of = vec![0usize; d];
    let mut start = 0;
    for (bi, &s) in block_sizes.iter().enumerate() {
        block_of[start..start + s].fill(bi);
        start += s;
    }
    let inv_b = 1.0 / per_example_grads.len() as f64;
    let mut within = 0.0;
    let mut cross = 0.0;
    for r in 0..d {
        for c in 0..d {
            let mut f = 0.0;
            for g in per_example_grads {
                f += g[r] * g[c];
            }
            f *= inv_b;
            if block_of[r] == block_of[c] {
                within += f * f;
            } else {
                cross += f * f;
            }
        }
    }
    Ok(BlockDiagonalityReport {
        within_mass: within,
        cross_mass: cross,
    })
}
