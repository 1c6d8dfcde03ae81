//! The whitening reparametrization of affine layers.
//!
//! An affine unit `y_j = w_0j + sum_i w_ij x_i` can be rewritten with
//! centered, scaled inputs and a scaled output:
//!
//! ```text
//! y_j = beta_j * (v_0j + sum_i alpha_i (x_i - mu_i) v_ij)
//! ```
//!
//! The map between `(w, w_0)` and `(v, v_0)` is exact and invertible for any
//! positive `alpha`, `beta`, so the network function never changes. Plain
//! gradient descent *in v*, pushed back through that map, turns into a cheap
//! update rule *in w* built from quantities an ordinary backward pass already
//! produces, plus three running moments. [`reparam_delta`] is that rule;
//! [`block_matrix_delta`] is the same update written as an explicit
//! block-diagonal preconditioner, kept as a slow twin for verification.
//!
//! Statistics are always in per-example units: `mean_g` and `mean_gx` match
//! what backpropagating a batch-averaged loss already computes, and
//! `mean_g2` undoes the `1/B` loss scaling internally.

use crate::error::{Error, Result};
use crate::nn::LayerParams;
use crate::tensor::Tensor;

/// Floors and clamps that keep the estimated constants finite and bounded.
#[derive(Debug, Clone)]
pub struct ClampConfig {
    /// Variance floor before inversion.
    pub var_floor: f64,
    /// Floor on the (sharing-scaled) gradient second moment before inversion.
    pub g2_floor: f64,
    pub alpha2_min: f64,
    pub alpha2_max: f64,
    pub beta2_min: f64,
    pub beta2_max: f64,
}

impl Default for ClampConfig {
    fn default() -> Self {
        ClampConfig {
            var_floor: 1e-8,
            g2_floor: 1e-12,
            alpha2_min: 1e-4,
            alpha2_max: 1e4,
            beta2_min: 1e-6,
            beta2_max: 1e2,
        }
    }
}

/// Exponential moving averages of the moments one layer needs: per-input
/// mean and second moment of the activations, per-unit second moment of the
/// (per-application) output gradient.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub mean_x: Vec<f64>,
    pub mean_x2: Vec<f64>,
    pub mean_g2: Vec<f64>,
    /// Retention of the old average: `m <- lambda * m + (1 - lambda) * batch`.
    pub lambda: f64,
    pub updates: u64,
}

impl MomentState {
    pub fn new(fanin: usize, fanout: usize, lambda: f64) -> Self {
        MomentState {
            mean_x: vec![0.0; fanin],
            mean_x2: vec![0.0; fanin],
            mean_g2: vec![0.0; fanout],
            lambda,
            updates: 0,
        }
    }
}

/// The constants of the reparametrization for one layer. `alpha2` and
/// `beta2` are stored squared; `mu` is the input shift. For a convolution
/// the input index runs over kernel coordinates `(c, u, v)` in row-major
/// order, with per-channel values broadcast across offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamConstants {
    pub mu: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub beta2: Vec<f64>,
}

impl ReparamConstants {
    /// Identity transform: `mu = 0`, `alpha = beta = 1` gives back plain SGD.
    pub fn identity(fanin: usize, fanout: usize) -> Self {
        ReparamConstants {
            mu: vec![0.0; fanin],
            alpha2: vec![1.0; fanin],
            beta2: vec![1.0; fanout],
        }
    }

    pub fn fanin(&self) -> usize {
        self.mu.len()
    }

    pub fn fanout(&self) -> usize {
        self.beta2.len()
    }

    fn validate(&self) -> Result<()> {
        if self.mu.len() != self.alpha2.len() {
            return Err(Error::dim("mu and alpha2 lengths differ".to_string()));
        }
        let pos = self
            .alpha2
            .iter()
            .chain(&self.beta2)
            .all(|&v| v > 0.0 && v.is_finite());
        if !pos {
            return Err(Error::State(
                "alpha2 and beta2 must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Per-batch averages of everything the update rules consume, in
/// per-example units. For a convolution, `mean_g` and `mean_gx` sum over
/// kernel applications (matching the weight gradient), `mean_g2` is the
/// per-application second moment, and the input moments pool each channel
/// over batch and space.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean_x: Vec<f64>,
    pub mean_x2: Vec<f64>,
    pub mean_g: Vec<f64>,
    pub mean_g2: Vec<f64>,
    /// `[fanout, fanin]` average of the per-example outer product; equal to
    /// the weight gradient of the batch-averaged loss.
    pub mean_gx: Tensor,
}

impl BatchStats {
    fn validate(&self) -> Result<(usize, usize)> {
        let n = self.mean_x.len();
        let m = self.mean_g.len();
        if self.mean_x2.len() != n || self.mean_g2.len() != m || self.mean_gx.shape() != [m, n] {
            return Err(Error::dim(format!(
                "inconsistent batch stats: n={n}, m={m}, mean_gx {:?}",
                self.mean_gx.shape()
            )));
        }
        if n == 0 || m == 0 {
            return Err(Error::dim("empty batch stats".to_string()));
        }
        Ok((n, m))
    }
}

/// Builds dense-layer statistics from scratch. `gy` must be the gradient of
/// a batch-averaged loss at the layer's pre-activation output; the implied
/// `1/B` is undone where per-example moments need it.
pub fn dense_batch_stats(x: &Tensor, gy: &Tensor) -> Result<BatchStats> {
    let [batch, n] = *x.shape() else {
        return Err(Error::dim(format!(
            "expected [B, n] input, got {:?}",
            x.shape()
        )));
    };
    let [gb, m] = *gy.shape() else {
        return Err(Error::dim(format!(
            "expected [B, m] gradient, got {:?}",
            gy.shape()
        )));
    };
    if gb != batch || batch == 0 {
        return Err(Error::dim(format!("batch sizes differ: {batch} vs {gb}")));
    }
    let bf = batch as f64;
    let xd = x.data();
    let gd = gy.data();
    let mut stats = BatchStats {
        mean_x: vec![0.0; n],
        mean_x2: vec![0.0; n],
        mean_g: vec![0.0; m],
        mean_g2: vec![0.0; m],
        mean_gx: Tensor::zeros(&[m, n]),
    };
    for b in 0..batch {
        let xrow = &xd[b * n..(b + 1) * n];
        let grow = &gd[b * m..(b + 1) * m];
        for (i, &x) in xrow.iter().enumerate() {
            stats.mean_x[i] += x;
            stats.mean_x2[i] += x * x;
        }
        let gxd = stats.mean_gx.data_mut();
        for (j, &g) in grow.iter().enumerate() {
            stats.mean_g[j] += g;
            stats.mean_g2[j] += g * g;
            let row = &mut gxd[j * n..(j + 1) * n];
            for (r, &x) in row.iter_mut().zip(xrow) {
                *r += g * x;
            }
        }
    }
    for v in stats.mean_x.iter_mut().chain(&mut stats.mean_x2) {
        *v /= bf;
    }
    // gy carries 1/B, so sums over the batch are already per-example means;
    // the second moment needs one factor of B put back.
    for v in stats.mean_g2.iter_mut() {
        *v *= bf;
    }
    Ok(stats)
}

/// Builds convolution-layer statistics from scratch. Input moments pool each
/// channel over batch and the full spatial extent (per-channel image
/// statistics stand in for per-coordinate patch statistics) and are
/// broadcast over kernel offsets.
pub fn conv_batch_stats(x: &Tensor, gy: &Tensor, kernel: (usize, usize)) -> Result<BatchStats> {
    let [batch, c, h, w] = *x.shape() else {
        return Err(Error::dim(format!(
            "expected [B, c, H, W] input, got {:?}",
            x.shape()
        )));
    };
    let (k1, k2) = kernel;
    if h < k1 || w < k2 || k1 == 0 || k2 == 0 {
        return Err(Error::dim(format!(
            "kernel {k1}x{k2} too large for {h}x{w}"
        )));
    }
    let (ho, wo) = (h - k1 + 1, w - k2 + 1);
    let [gb, m, gho, gwo] = *gy.shape() else {
        return Err(Error::dim(format!(
            "expected [B, m, H', W'] gradient, got {:?}",
            gy.shape()
        )));
    };
    if gb != batch || gho != ho || gwo != wo || batch == 0 {
        return Err(Error::dim(format!(
            "gradient shape {:?} inconsistent with input {:?} and kernel {kernel:?}",
            gy.shape(),
            x.shape()
        )));
    }
    let n = c * k1 * k2;
    let s = ho * wo;
    let bf = batch as f64;
    let xd = x.data();
    let gd = gy.data();

    let mut mean_x = vec![0.0; n];
    let mut mean_x2 = vec![0.0; n];
    for ci in 0..c {
        let mut sx = 0.0;
        let mut sx2 = 0.0;
        for b in 0..batch {
            let plane = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for &v in plane {
                sx += v;
                sx2 += v * v;
            }
        }
        let denom = (batch * h * w) as f64;
        for u in 0..k1 {
            for v in 0..k2 {
                let i = (ci * k1 + u) * k2 + v;
                mean_x[i] = sx / denom;
                mean_x2[i] = sx2 / denom;
            }
        }
    }

    let mut mean_g = vec![0.0; m];
    let mut mean_g2 = vec![0.0; m];
    let mut mean_gx = Tensor::zeros(&[m, n]);
    {
        let gxd = mean_gx.data_mut();
        for b in 0..batch {
            for o in 0..m {
                let gplane = &gd[(b * m + o) * s..(b * m + o + 1) * s];
                for p in 0..ho {
                    for q in 0..wo {
                        let g = gplane[p * wo + q];
                        mean_g[o] += g;
                        mean_g2[o] += g * g;
                        for ci in 0..c {
                            let xplane = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                            for u in 0..k1 {
                                for v in 0..k2 {
                                    let i = (ci * k1 + u) * k2 + v;
                                    gxd[o * n + i] += g * xplane[(p + u) * w + q + v];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    // Per-application second moment in per-example units: each of the B * S
    // applications saw a gradient of B * gy.
    for v in mean_g2.iter_mut() {
        *v *= bf / s as f64;
    }
    Ok(BatchStats {
        mean_x,
        mean_x2,
        mean_g,
        mean_g2,
        mean_gx,
    })
}

/// Assembles statistics from products a backward pass already computed,
/// which is the production route: only the three moment accumulations are
/// new work. `extra_ops`, when given, counts those accumulations as one op
/// per input scalar and one per output-gradient scalar touched, so a dense
/// layer on a batch of `B` adds exactly `B * (n + m)` and a convolution
/// `B * (c*H*W + m*S)`.
pub fn stats_from_backward(
    x: &Tensor,
    gy: &Tensor,
    grad_w: &Tensor,
    grad_b: &Tensor,
    extra_ops: Option<&mut usize>,
) -> Result<BatchStats> {
    let m = grad_b.len();
    let bf = x.shape().first().copied().unwrap_or(0) as f64;
    if bf == 0.0 {
        return Err(Error::dim("empty batch".to_string()));
    }
    let mut count = 0usize;
    let (mean_x, mean_x2, mean_g2, n) = match (x.shape(), gy.shape()) {
        ([batch, n], [gb, gm]) if gb == batch && *gm == m => {
            let (batch, n) = (*batch, *n);
            let mut mean_x = vec![0.0; n];
            let mut mean_x2 = vec![0.0; n];
            let mut mean_g2 = vec![0.0; m];
            let xd = x.data();
            let gd = gy.data();
            for b in 0..batch {
                for i in 0..n {
                    let v = xd[b * n + i];
                    mean_x[i] += v;
                    mean_x2[i] += v * v;
                }
                for j in 0..m {
                    let g = gd[b * m + j];
                    mean_g2[j] += g * g;
                }
                count += n + m;
            }
            for v in mean_x.iter_mut().chain(&mut mean_x2) {
                *v /= bf;
            }
            for v in mean_g2.iter_mut() {
                *v *= bf;
            }
            (mean_x, mean_x2, mean_g2, n)
        }
        ([batch, c, h, w], [gb, gm, ho, wo]) if gb == batch && *gm == m => {
            let (batch, c, h, w, ho, wo) = (*batch, *c, *h, *w, *ho, *wo);
            let [_, gc, k1, k2] = *grad_w.shape() else {
                return Err(Error::dim(format!(
                    "expected conv weight gradient, got {:?}",
                    grad_w.shape()
                )));
            };
            if gc != c || h + 1 != ho + k1 || w + 1 != wo + k2 {
                return Err(Error::dim(format!(
                    "gradient {:?} inconsistent with input {:?} and kernel {k1}x{k2}",
                    gy.shape(),
                    x.shape()
                )));
            }
            let n = c * k1 * k2;
            let s = ho * wo;
            let mut mean_x = vec![0.0; n];
            let mut mean_x2 = vec![0.0; n];
            let mut mean_g2 = vec![0.0; m];
            let xd = x.data();
            let gd = gy.data();
            for b in 0..batch {
                for ci in 0..c {
                    let plane = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    let mut sx = 0.0;
                    let mut sx2 = 0.0;
                    for &v in plane {
                        sx += v;
                        sx2 += v * v;
                    }
                    let i0 = ci * k1 * k2;
                    let denom = (batch * h * w) as f64;
                    for i in i0..i0 + k1 * k2 {
                        mean_x[i] += sx / denom;
                        mean_x2[i] += sx2 / denom;
                    }
                }
                for o in 0..m {
                    let gplane = &gd[(b * m + o) * s..(b * m + o + 1) * s];
                    for &g in gplane {
                        mean_g2[o] += g * g;
                    }
                }
                count += c * h * w + m * s;
            }
            for v in mean_g2.iter_mut() {
                *v *= bf / s as f64;
            }
            (mean_x, mean_x2, mean_g2, n)
        }
        _ => {
            return Err(Error::dim(format!(
                "input {:?} and gradient {:?} are not a dense or conv pair",
                x.shape(),
                gy.shape()
            )))
        }
    };
    if let Some(ops) = extra_ops {
        *ops = count;
    }
    let mean_gx = grad_w.clone().reshaped(&[m, n])?;
    Ok(BatchStats {
        mean_x,
        mean_x2,
        mean_g: grad_b.data().to_vec(),
        mean_g2,
        mean_gx,
    })
}

/// Blends a batch's statistics into the moving averages. The first update
/// copies the batch values so cold starts are unbiased.
pub fn update_moments(state: &mut MomentState, stats: &BatchStats) -> Result<()> {
    let (n, m) = stats.validate()?;
    if state.mean_x.len() != n || state.mean_g2.len() != m {
        return Err(Error::dim(format!(
            "moment state sized {}x{}, stats {n}x{m}",
            state.mean_x.len(),
            state.mean_g2.len()
        )));
    }
    if !(0.0..1.0).contains(&state.lambda) {
        return Err(Error::State(format!(
            "lambda {} outside [0, 1)",
            state.lambda
        )));
    }
    let lam = if state.updates == 0 {
        0.0
    } else {
        state.lambda
    };
    for (s, &b) in state.mean_x.iter_mut().zip(&stats.mean_x) {
        *s = lam * *s + (1.0 - lam) * b;
    }
    for (s, &b) in state.mean_x2.iter_mut().zip(&stats.mean_x2) {
        *s = lam * *s + (1.0 - lam) * b;
    }
    for (s, &b) in state.mean_g2.iter_mut().zip(&stats.mean_g2) {
        *s = lam * *s + (1.0 - lam) * b;
    }
    state.updates += 1;
    Ok(())
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// Curvature-matched constants: `mu` is the mean input, `alpha2` the inverse
/// input variance, `beta2` the inverse of the sharing-scaled gradient second
/// moment. All three come from the moving averages, floored and clamped.
pub fn canonical_constants(
    state: &MomentState,
    sharing: usize,
    cfg: &ClampConfig,
) -> Result<ReparamConstants> {
    if state.updates == 0 {
        return Err(Error::State("moment state has never been updated".into()));
    }
    if sharing == 0 {
        return Err(Error::State("sharing count must be >= 1".into()));
    }
    let mut c = ReparamConstants {
        mu: state.mean_x.clone(),
        alpha2: Vec::with_capacity(state.mean_x.len()),
        beta2: Vec::with_capacity(state.mean_g2.len()),
    };
    for i in 0..state.mean_x.len() {
        let var = (state.mean_x2[i] - state.mean_x[i] * state.mean_x[i]).max(cfg.var_floor);
        c.alpha2
            .push(clamp(1.0 / var, cfg.alpha2_min, cfg.alpha2_max));
    }
    for &g2 in &state.mean_g2 {
        let denom = (sharing as f64 * g2).max(cfg.g2_floor);
        c.beta2
            .push(clamp(1.0 / denom, cfg.beta2_min, cfg.beta2_max));
    }
    Ok(c)
}

/// Whitening-only constants: input statistics as in
/// [`canonical_constants`], but `beta2 = 1 / sqrt(n * S)` from layer
/// geometry alone, dropping the gradient moment. This is the variant that
/// needs no curvature estimate and stays well conditioned at initialization.
pub fn whitening_constants(
    state: &MomentState,
    sharing: usize,
    cfg: &ClampConfig,
) -> Result<ReparamConstants> {
    let mut c = canonical_constants(state, sharing, cfg)?;
    let n = state.mean_x.len();
    let b2 = clamp(
        1.0 / ((n * sharing) as f64).sqrt(),
        cfg.beta2_min,
        cfg.beta2_max,
    );
    c.beta2 = vec![b2; c.beta2.len()];
    Ok(c)
}

/// The cheap update: the gradient preconditioned by the reparametrization,
/// assembled from batch statistics alone.
///
/// ```text
/// dw[j,i] = beta2[j] * alpha2[i] * (mean_gx[j,i] - mu[i] * mean_g[j])
/// db[j]   = beta2[j] * mean_g[j] - sum_i mu[i] * dw[j,i]
/// ```
///
/// Returns `(dw, db)` as a descent direction to be *subtracted* after
/// stepsize scaling.
pub fn reparam_delta(stats: &BatchStats, c: &ReparamConstants) -> Result<(Tensor, Vec<f64>)> {
    let (n, m) = stats.validate()?;
    c.validate()?;
    if c.fanin() != n || c.fanout() != m {
        return Err(Error::dim(format!(
            "constants sized {}x{}, stats {n}x{m}",
            c.fanin(),
            c.fanout()
        )));
    }
    let mut dw = Tensor::zeros(&[m, n]);
    let mut db = vec![0.0; m];
    let gxd = stats.mean_gx.data();
    let dwd = dw.data_mut();
    for j in 0..m {
        let b2 = c.beta2[j];
        let g = stats.mean_g[j];
        let mut bias = b2 * g;
        for i in 0..n {
            let d = b2 * c.alpha2[i] * (gxd[j * n + i] - c.mu[i] * g);
            dwd[j * n + i] = d;
            bias -= c.mu[i] * d;
        }
        db[j] = bias;
    }
    Ok((dw, db))
}

/// One-pass per-example form of [`reparam_delta`] for dense layers: walks
/// the batch once, accumulating the update and the batch statistics
/// together. Exists to make the cost claim concrete; `extra_ops` counts the
/// moment accumulations exactly as in [`stats_from_backward`], so it lands
/// at `B * (n + m)`.
pub fn reparam_delta_per_example(
    x: &Tensor,
    gy: &Tensor,
    c: &ReparamConstants,
    extra_ops: Option<&mut usize>,
) -> Result<(Tensor, Vec<f64>, BatchStats)> {
    c.validate()?;
    let [batch, n] = *x.shape() else {
        return Err(Error::dim(format!(
            "expected [B, n] input, got {:?}",
            x.shape()
        )));
    };
    let [gb, m] = *gy.shape() else {
        return Err(Error::dim(format!(
            "expected [B, m] gradient, got {:?}",
            gy.shape()
        )));
    };
    if gb != batch || batch == 0 || c.fanin() != n || c.fanout() != m {
        return Err(Error::dim(format!(
            "shapes inconsistent: x {:?}, gy {:?}, constants {}x{}",
            x.shape(),
            gy.shape(),
            c.fanin(),
            c.fanout()
        )));
    }
    let bf = batch as f64;
    let xd = x.data();
    let gd = gy.data();
    let mut dw = Tensor::zeros(&[m, n]);
    let mut db = vec![0.0; m];
    let mut stats = BatchStats {
        mean_x: vec![0.0; n],
        mean_x2: vec![0.0; n],
        mean_g: vec![0.0; m],
        mean_g2: vec![0.0; m],
        mean_gx: Tensor::zeros(&[m, n]),
    };
    let mut count = 0usize;
    {
        let dwd = dw.data_mut();
        let gxd = stats.mean_gx.data_mut();
        for b in 0..batch {
            let xrow = &xd[b * n..(b + 1) * n];
            let grow = &gd[b * m..(b + 1) * m];
            for (i, &xv) in xrow.iter().enumerate() {
                stats.mean_x[i] += xv;
                stats.mean_x2[i] += xv * xv;
            }
            for j in 0..m {
                let g = grow[j];
                stats.mean_g[j] += g;
                stats.mean_g2[j] += g * g;
                let b2 = c.beta2[j];
                let mut bias = b2 * g;
                for i in 0..n {
                    gxd[j * n + i] += g * xrow[i];
                    let d = b2 * c.alpha2[i] * (xrow[i] - c.mu[i]) * g;
                    dwd[j * n + i] += d;
                    bias -= c.mu[i] * d;
                }
                db[j] += bias;
            }
            count += n + m;
        }
    }
    for v in stats.mean_x.iter_mut().chain(&mut stats.mean_x2) {
        *v /= bf;
    }
    for v in stats.mean_g2.iter_mut() {
        *v *= bf;
    }
    if let Some(ops) = extra_ops {
        *ops = count;
    }
    Ok((dw, db, stats))
}

/// Convolution form of the update: statistics from
/// [`conv_batch_stats`], the shared delta core, and the weight delta
/// reshaped back to kernel layout `[m, c, k1, k2]`.
pub fn conv_reparam_delta(
    x: &Tensor,
    gy: &Tensor,
    params: &LayerParams,
    c: &ReparamConstants,
) -> Result<(Tensor, Vec<f64>)> {
    if !params.is_conv() {
        return Err(Error::State("conv_reparam_delta needs conv params".into()));
    }
    let stats = conv_batch_stats(x, gy, params.kernel)?;
    let (dw, db) = reparam_delta(&stats, c)?;
    let (k1, k2) = params.kernel;
    Ok((
        dw.reshaped(&[params.fanout, params.in_channels, k1, k2])?,
        db,
    ))
}

/// The explicit preconditioner block for unit `j`, indexed `[bias, w_1 ..
/// w_n]`:
///
/// ```text
/// M[0,0] = beta2 * (1 + sum_i alpha2[i] * mu[i]^2)
/// M[0,i] = M[i,0] = -beta2 * alpha2[i] * mu[i]
/// M[i,i] = beta2 * alpha2[i]
/// ```
///
/// Symmetric positive definite for any positive `alpha2`, `beta2`: the Schur
/// complement of the diagonal block is exactly `beta2 * 1`.
pub fn block_matrix(c: &ReparamConstants, j: usize) -> Result<Tensor> {
    c.validate()?;
    if j >= c.fanout() {
        return Err(Error::dim(format!(
            "unit {j} out of range for fanout {}",
            c.fanout()
        )));
    }
    let n = c.fanin();
    let b2 = c.beta2[j];
    let mut m = Tensor::zeros(&[n + 1, n + 1]);
    let md = m.data_mut();
    let mut corner = 1.0;
    for i in 0..n {
        corner += c.alpha2[i] * c.mu[i] * c.mu[i];
        md[(i + 1) * (n + 1) + i + 1] = b2 * c.alpha2[i];
        let off = -b2 * c.alpha2[i] * c.mu[i];
        md[i + 1] = off;
        md[(i + 1) * (n + 1)] = off;
    }
    md[0] = b2 * corner;
    Ok(m)
}

/// The slow twin of [`reparam_delta`]: materializes every unit's
/// preconditioner block and multiplies it against the averaged gradient
/// `[mean_g[j], mean_gx[j, :]]`. Used to verify the cheap rule; quadratic
/// in the fanin, so keep it off hot paths.
pub fn block_matrix_delta(stats: &BatchStats, c: &ReparamConstants) -> Result<(Tensor, Vec<f64>)> {
    let (n, m) = stats.validate()?;
    if c.fanin() != n || c.fanout() != m {
        return Err(Error::dim(format!(
            "constants sized {}x{}, stats {n}x{m}",
            c.fanin(),
            c.fanout()
        )));
    }
    let mut dw = Tensor::zeros(&[m, n]);
    let mut db = vec![0.0; m];
    let gxd = stats.mean_gx.data();
    for j in 0..m {
        let block = block_matrix(c, j)?;
        let bd = block.data();
        let mut grad = Vec::with_capacity(n + 1);
        grad.push(stats.mean_g[j]);
        grad.extend_from_slice(&gxd[j * n..(j + 1) * n]);
        for r in 0..n + 1 {
            let mut acc = 0.0;
            for (col, &g) in grad.iter().enumerate() {
                acc += bd[r * (n + 1) + col] * g;
            }
            if r == 0 {
                db[j] = acc;
            } else {
                dw.data_mut()[j * n + r - 1] = acc;
            }
        }
    }
    Ok((dw, db))
}

/// Confirms the parameter map is an exact identity on the layer function:
/// converts `(w, b)` to the centered-scaled form, evaluates both on `x`, and
/// returns the largest absolute output difference.
pub fn function_preservation_check(
    params: &LayerParams,
    c: &ReparamConstants,
    x: &Tensor,
) -> Result<f64> {
    use crate::nn::linear_forward;
    if params.is_conv() {
        return Err(Error::State(
            "preservation check runs on dense layers; a convolution applies the same map per patch"
                .into(),
        ));
    }
    c.validate()?;
    let (n, m) = (params.in_channels, params.fanout);
    if c.fanin() != n || c.fanout() != m {
        return Err(Error::dim(format!(
            "constants sized {}x{}, layer {n}x{m}",
            c.fanin(),
            c.fanout()
        )));
    }
    let plain = linear_forward(x, params)?;

    // v[j,i] = w[j,i] / (alpha[i] beta[j]); v0[j] = (b[j] + sum_i w[j,i] mu[i]) / beta[j].
    let alpha: Vec<f64> = c.alpha2.iter().map(|v| v.sqrt()).collect();
    let beta: Vec<f64> = c.beta2.iter().map(|v| v.sqrt()).collect();
    let wd = params.weights.data();
    let bd = params.bias.data();
    let [batch, _] = *x.shape() else {
        return Err(Error::dim(format!(
            "expected [B, n] input, got {:?}",
            x.shape()
        )));
    };
    let mut max_diff: f64 = 0.0;
    for b in 0..batch {
        for j in 0..m {
            let mut v0 = bd[j];
            for i in 0..n {
                v0 += wd[j * n + i] * c.mu[i];
            }
            v0 /= beta[j];
            let mut acc = v0;
            for i in 0..n {
                let v = wd[j * n + i] / (alpha[i] * beta[j]);
                acc += alpha[i] * (x.at2(b, i) - c.mu[i]) * v;
            }
            let y = beta[j] * acc;
            max_diff = max_diff.max((y - plain.at2(b, j)).abs());
        }
    }
    Ok(max_diff)
}
