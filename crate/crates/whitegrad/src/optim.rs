//! Training loop plumbing: algorithm dispatch, the per-step update rules,
//! divergence detection, the batch-norm fold, and the estimation-coupling
//! experiment.
//!
//! Every algorithm runs through the same [`step`] function so that a run's
//! records are comparable across algorithms: identical minibatch schedule,
//! identical diagnostics, identical divergence checks. The reparametrized
//! algorithms follow a fixed per-layer sequence (batch statistics, moment
//! update, constants, delta, apply) that the tests pin down.

use crate::error::{Divergence, Error, Result};
use crate::nn::network::{AffineLayer, NormLayer};
use crate::nn::{softmax_xent, Layer, Mode, Network};
use crate::records::TrainRecord;
use crate::reparam::{
    canonical_constants, reparam_delta, stats_from_backward, update_moments, whitening_constants,
    ClampConfig, MomentState, ReparamConstants,
};
use crate::stepsize::{fanin_scale, RmsState};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::time::Instant;

/// The update rules the trainer can run. `BatchnormSgd` is plain SGD on a
/// network that carries batch-norm layers; `MitigationSchedule` starts as
/// `BatchnormSgd`, folds the normalizers away at `switch_epoch`, and
/// continues as `ReparamWhitening`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Sgd,
    SgdFanin,
    Rmsprop,
    ReparamCanonical,
    ReparamWhitening,
    BatchnormSgd,
    MitigationSchedule,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Sgd,
        Algorithm::SgdFanin,
        Algorithm::Rmsprop,
        Algorithm::ReparamCanonical,
        Algorithm::ReparamWhitening,
        Algorithm::BatchnormSgd,
        Algorithm::MitigationSchedule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::SgdFanin => "sgd_fanin",
            Algorithm::Rmsprop => "rmsprop",
            Algorithm::ReparamCanonical => "reparam_canonical",
            Algorithm::ReparamWhitening => "reparam_whitening",
            Algorithm::BatchnormSgd => "batchnorm_sgd",
            Algorithm::MitigationSchedule => "mitigation_schedule",
        }
    }

    /// Whether the network built for this algorithm should carry batch-norm
    /// layers. A mitigation schedule with `switch_epoch == 0` never runs its
    /// batch-norm phase, so it gets a plain network.
    pub fn wants_batchnorm(self, switch_epoch: u64) -> bool {
        match self {
            Algorithm::BatchnormSgd => true,
            Algorithm::MitigationSchedule => switch_epoch > 0,
            _ => false,
        }
    }

    /// The rule actually applied at `epoch`. Only the mitigation schedule is
    /// epoch-dependent.
    fn effective(self, epoch: u64, switch_epoch: u64) -> Algorithm {
        match self {
            Algorithm::MitigationSchedule => {
                if epoch < switch_epoch {
                    Algorithm::BatchnormSgd
                } else {
                    Algorithm::ReparamWhitening
                }
            }
            other => other,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Algorithm> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm '{s}'")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    /// Base stepsize.
    pub gamma: f64,
    /// Retention of the old moment averages in the reparametrized rules.
    pub lambda_ema: f64,
    /// Blend weight on the incoming squared gradient in RMSProp.
    pub lambda_rms: f64,
    /// RMSProp regularizer under the square root.
    pub mu: f64,
    pub clamp: ClampConfig,
    /// Epoch at which a mitigation run folds its batch-norm layers.
    pub switch_epoch: u64,
    /// Estimate the constants from the current minibatch alone instead of
    /// the moving averages. Exists to demonstrate the estimation-coupling
    /// bias; leave off for real runs.
    pub batch_constants: bool,
    /// A minibatch loss above this aborts the run as diverged.
    pub divergence_limit: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Sgd,
            gamma: 0.01,
            lambda_ema: 0.95,
            lambda_rms: 0.1,
            mu: 1e-8,
            clamp: ClampConfig::default(),
            switch_epoch: 2,
            batch_constants: false,
            divergence_limit: 1e8,
        }
    }
}

/// Mutable optimizer state carried across steps. Keyed by layer or array
/// name so it survives a mid-run batch-norm fold, which renumbers nothing.
#[derive(Debug, Clone)]
pub struct OptState {
    /// Moving moment averages, one per affine layer.
    pub moments: BTreeMap<String, MomentState>,
    /// RMSProp accumulators, one per trainable array.
    pub rms: BTreeMap<String, RmsState>,
    pub steps: u64,
    /// Per-example scalar reads spent on constant estimation, summed over
    /// the run. Stays zero for the non-reparametrized algorithms.
    pub extra_ops: usize,
}

impl OptState {
    pub fn new(net: &Network, cfg: &OptimizerConfig) -> Self {
        let mut moments = BTreeMap::new();
        let mut rms = BTreeMap::new();
        for layer in &net.layers {
            match layer {
                Layer::Affine(a) => {
                    moments.insert(
                        a.name.clone(),
                        MomentState::new(a.params.fanin(), a.params.fanout, cfg.lambda_ema),
                    );
                    rms.insert(
                        format!("{}.w", a.name),
                        RmsState::new(a.params.weights.len(), cfg.lambda_rms),
                    );
                    rms.insert(
                        format!("{}.b", a.name),
                        RmsState::new(a.params.bias.len(), cfg.lambda_rms),
                    );
                }
                Layer::Norm(nl) => {
                    let c = nl.state.channels();
                    rms.insert(
                        format!("{}.scale", nl.name),
                        RmsState::new(c, cfg.lambda_rms),
                    );
                    rms.insert(
                        format!("{}.shift", nl.name),
                        RmsState::new(c, cfg.lambda_rms),
                    );
                }
                _ => {}
            }
        }
        OptState {
            moments,
            rms,
            steps: 0,
            extra_ops: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub loss: f64,
    pub diag: Vec<(String, f64)>,
}

fn diverged(step: u64, location: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Divergence(Box::new(Divergence {
        step,
        location: location.into(),
        reason: reason.into(),
        records: Vec::new(),
    }))
}

fn first_nonfinite(net: &Network) -> Option<String> {
    for layer in &net.layers {
        match layer {
            Layer::Affine(a) => {
                if !a.params.weights.all_finite() || !a.params.bias.all_finite() {
                    return Some(a.name.clone());
                }
            }
            Layer::Norm(nl) => {
                let ok = nl
                    .state
                    .scale
                    .iter()
                    .chain(&nl.state.shift)
                    .all(|v| v.is_finite());
                if !ok {
                    return Some(nl.name.clone());
                }
            }
            _ => {}
        }
    }
    None
}

fn l2_norm<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    parts
        .into_iter()
        .flat_map(|s| s.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// The signed increments one affine layer should add to its parameters, plus
/// the moment-average gap diagnostic (zero for rules without moments).
fn affine_increments(
    a: &AffineLayer,
    algo: Algorithm,
    cfg: &OptimizerConfig,
    state: &mut OptState,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let grad_w = a.grad_w.as_ref().ok_or_else(|| backward_missing(&a.name))?;
    let grad_b = a.grad_b.as_ref().ok_or_else(|| backward_missing(&a.name))?;
    match algo {
        Algorithm::Sgd | Algorithm::BatchnormSgd | Algorithm::SgdFanin => {
            let scale = if algo == Algorithm::SgdFanin {
                cfg.gamma * fanin_scale(a.params.fanin(), a.params.sharing)?
            } else {
                cfg.gamma
            };
            let wstep = grad_w.data().iter().map(|g| -scale * g).collect();
            let bstep = grad_b.data().iter().map(|g| -scale * g).collect();
            Ok((wstep, bstep, 0.0))
        }
        Algorithm::Rmsprop => {
            let rw = state
                .rms
                .get_mut(&format!("{}.w", a.name))
                .ok_or_else(|| state_missing(&a.name))?;
            let wstep = rw.rmsprop_step(grad_w.data(), cfg.gamma, cfg.mu)?;
            let rb = state
                .rms
                .get_mut(&format!("{}.b", a.name))
                .ok_or_else(|| state_missing(&a.name))?;
            let bstep = rb.rmsprop_step(grad_b.data(), cfg.gamma, cfg.mu)?;
            Ok((wstep, bstep, 0.0))
        }
        Algorithm::ReparamCanonical | Algorithm::ReparamWhitening => {
            let x = a.x.as_ref().ok_or_else(|| backward_missing(&a.name))?;
            let gy = a.gy.as_ref().ok_or_else(|| backward_missing(&a.name))?;
            let mut ops = 0usize;
            let stats = stats_from_backward(x, gy, grad_w, grad_b, Some(&mut ops))?;
            state.extra_ops += ops;
            let ms = state
                .moments
                .get_mut(&a.name)
                .ok_or_else(|| state_missing(&a.name))?;
            update_moments(ms, &stats)?;
            let gap = ms
                .mean_x
                .iter()
                .zip(&stats.mean_x)
                .map(|(m, b)| (m - b).abs())
                .fold(0.0_f64, f64::max);
            let consts = if cfg.batch_constants {
                let mut fresh = MomentState::new(a.params.fanin(), a.params.fanout, 0.0);
                update_moments(&mut fresh, &stats)?;
                layer_constants(algo, &fresh, a.params.sharing, &cfg.clamp)?
            } else {
                layer_constants(algo, ms, a.params.sharing, &cfg.clamp)?
            };
            let (dw, db) = reparam_delta(&stats, &consts)?;
            let wstep = dw.data().iter().map(|d| -cfg.gamma * d).collect();
            let bstep = db.iter().map(|d| -cfg.gamma * d).collect();
            Ok((wstep, bstep, gap))
        }
        Algorithm::MitigationSchedule => Err(Error::State(
            "mitigation schedule must be resolved per epoch".into(),
        )),
    }
}

fn layer_constants(
    algo: Algorithm,
    ms: &MomentState,
    sharing: usize,
    clamp: &ClampConfig,
) -> Result<ReparamConstants> {
    match algo {
        Algorithm::ReparamCanonical => canonical_constants(ms, sharing, clamp),
        Algorithm::ReparamWhitening => whitening_constants(ms, sharing, clamp),
        _ => Err(Error::State(format!(
            "{algo} does not use reparametrization constants"
        ))),
    }
}

fn backward_missing(name: &str) -> Error {
    Error::State(format!(
        "layer {name} has no gradients; backward has not run"
    ))
}

fn state_missing(name: &str) -> Error {
    Error::State(format!("optimizer state missing for layer {name}"))
}

/// Batch-norm scale and shift always take plain (or RMSProp) steps; the
/// reparametrized rules only touch affine layers.
fn norm_increments(
    nl: &NormLayer,
    algo: Algorithm,
    cfg: &OptimizerConfig,
    state: &mut OptState,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let gs = nl
        .grad_scale
        .as_ref()
        .ok_or_else(|| backward_missing(&nl.name))?;
    let gh = nl
        .grad_shift
        .as_ref()
        .ok_or_else(|| backward_missing(&nl.name))?;
    if algo == Algorithm::Rmsprop {
        let rs = state
            .rms
            .get_mut(&format!("{}.scale", nl.name))
            .ok_or_else(|| state_missing(&nl.name))?;
        let sstep = rs.rmsprop_step(gs, cfg.gamma, cfg.mu)?;
        let rh = state
            .rms
            .get_mut(&format!("{}.shift", nl.name))
            .ok_or_else(|| state_missing(&nl.name))?;
        let hstep = rh.rmsprop_step(gh, cfg.gamma, cfg.mu)?;
        Ok((sstep, hstep))
    } else {
        let sstep = gs.iter().map(|g| -cfg.gamma * g).collect();
        let hstep = gh.iter().map(|g| -cfg.gamma * g).collect();
        Ok((sstep, hstep))
    }
}

/// One full optimizer step on one minibatch: forward, loss, backward, then
/// the per-layer update for the configured algorithm. Returns the minibatch
/// loss and per-layer diagnostics; a non-finite or exploding loss, or a
/// non-finite parameter after the update, aborts with a structured
/// divergence error.
pub fn step(
    net: &mut Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &OptimizerConfig,
    state: &mut OptState,
    epoch: u64,
) -> Result<StepOutcome> {
    let step_idx = state.steps;
    let logits = net.forward(x, Mode::Train)?;
    let (loss, grad) = softmax_xent(&logits, labels)?;
    if !loss.is_finite() {
        return Err(diverged(
            step_idx,
            "loss",
            format!("non-finite minibatch loss {loss}"),
        ));
    }
    if loss > cfg.divergence_limit {
        return Err(diverged(
            step_idx,
            "loss",
            format!(
                "minibatch loss {loss:.3e} above limit {:.1e}",
                cfg.divergence_limit
            ),
        ));
    }
    net.backward(&grad)?;

    let algo = cfg.algorithm.effective(epoch, cfg.switch_epoch);
    let mut diag = Vec::new();
    for layer in net.layers.iter_mut() {
        match layer {
            Layer::Affine(a) => {
                let gnorm = l2_norm([
                    a.grad_w
                        .as_ref()
                        .ok_or_else(|| backward_missing(&a.name))?
                        .data(),
                    a.grad_b
                        .as_ref()
                        .ok_or_else(|| backward_missing(&a.name))?
                        .data(),
                ]);
                let (wstep, bstep, gap) = affine_increments(a, algo, cfg, state)?;
                for (w, s) in a.params.weights.data_mut().iter_mut().zip(&wstep) {
                    *w += s;
                }
                for (b, s) in a.params.bias.data_mut().iter_mut().zip(&bstep) {
                    *b += s;
                }
                let wnorm = l2_norm([a.params.weights.data(), a.params.bias.data()]);
                diag.push((format!("{}.gnorm", a.name), gnorm));
                diag.push((format!("{}.wnorm", a.name), wnorm));
                diag.push((format!("{}.ema_gap", a.name), gap));
            }
            Layer::Norm(nl) => {
                let (sstep, hstep) = norm_increments(nl, algo, cfg, state)?;
                for (v, s) in nl.state.scale.iter_mut().zip(&sstep) {
                    *v += s;
                }
                for (v, s) in nl.state.shift.iter_mut().zip(&hstep) {
                    *v += s;
                }
                // No diagnostics: these layers can disappear mid-run when a
                // mitigation schedule folds them, and the record columns
                // must stay constant over a run.
            }
            _ => {}
        }
    }
    for (k, d) in net.relu_death_fractions().iter().enumerate() {
        diag.push((format!("relu{}.dead", k + 1), *d));
    }
    if let Some(name) = first_nonfinite(net) {
        return Err(diverged(
            step_idx,
            name,
            "non-finite parameter after update",
        ));
    }
    state.steps += 1;
    Ok(StepOutcome { loss, diag })
}

/// Schedule settings for [`run_epochs`]. The trailing partial minibatch of
/// each epoch is dropped so every step sees the same batch size.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Record wall-clock milliseconds per step. Off by default so run
    /// output is byte-reproducible.
    pub timing: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            epochs: 1,
            batch_size: 64,
            seed: 0,
            timing: false,
        }
    }
}

/// Everything a finished run hands back: the per-step records plus the cost
/// counter for the constant estimation.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<TrainRecord>,
    pub extra_ops: usize,
    pub steps: u64,
}

/// Trains `net` on `(images, labels)` for the configured number of epochs
/// with a seeded shuffle per epoch. A mitigation schedule folds the
/// batch-norm layers at its switch epoch and re-keys the optimizer state.
/// On divergence the error carries all records gathered before the failure.
pub fn run_epochs(
    net: &mut Network,
    images: &Tensor,
    labels: &[usize],
    cfg: &OptimizerConfig,
    rs: &RunSettings,
) -> Result<RunReport> {
    let nex = images.shape().first().copied().unwrap_or(0);
    if nex == 0 || nex != labels.len() {
        return Err(Error::dim(format!(
            "{nex} examples against {} labels",
            labels.len()
        )));
    }
    if rs.batch_size == 0 || rs.batch_size > nex {
        return Err(Error::Config(format!(
            "batch size {} unusable with {nex} examples",
            rs.batch_size
        )));
    }
    let mut state = OptState::new(net, cfg);
    let mut records: Vec<TrainRecord> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(rs.seed);
    let mut idx: Vec<usize> = (0..nex).collect();

    for epoch in 0..rs.epochs {
        if cfg.algorithm == Algorithm::MitigationSchedule
            && epoch == cfg.switch_epoch
            && net.layers.iter().any(|l| matches!(l, Layer::Norm(_)))
        {
            // Probe with the first examples in dataset order so the fold
            // residual check does not depend on the shuffle.
            let probe_idx: Vec<usize> = (0..nex.min(rs.batch_size)).collect();
            let probe = gather_rows(images, &probe_idx)?;
            *net = fold_batchnorm(net, 1e-8, Some(&probe))?;
            let carried_steps = state.steps;
            let carried_ops = state.extra_ops;
            state = OptState::new(net, cfg);
            state.steps = carried_steps;
            state.extra_ops = carried_ops;
        }
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(rs.batch_size) {
            if chunk.len() < rs.batch_size {
                continue;
            }
            let bx = gather_rows(images, chunk)?;
            let bl: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let step_idx = state.steps;
            let started = rs.timing.then(Instant::now);
            match step(net, &bx, &bl, cfg, &mut state, epoch) {
                Ok(out) => {
                    let mut rec = TrainRecord::new(step_idx, epoch, out.loss);
                    if let Some(t0) = started {
                        rec.wall_ms = t0.elapsed().as_millis() as u64;
                    }
                    rec.diag = out.diag;
                    records.push(rec);
                }
                Err(Error::Divergence(mut d)) => {
                    d.records = records;
                    return Err(Error::Divergence(d));
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(RunReport {
        records,
        extra_ops: state.extra_ops,
        steps: state.steps,
    })
}

/// Copies the given examples (in order) out of a `[N, ...]` tensor.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let Some(&n) = t.shape().first() else {
        return Err(Error::dim("cannot gather from a rank-0 tensor".to_string()));
    };
    if idx.is_empty() {
        return Err(Error::Input("empty example selection".into()));
    }
    let row = t.len() / n.max(1);
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        if i >= n {
            return Err(Error::Input(format!(
                "example index {i} out of range for {n}"
            )));
        }
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_vec(&shape, data)
}

/// Mean loss and accuracy over a dataset in eval mode, batched to bound
/// memory. The final partial batch is included.
pub fn evaluate(
    net: &mut Network,
    images: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let nex = images.shape().first().copied().unwrap_or(0);
    if nex == 0 || nex != labels.len() || batch_size == 0 {
        return Err(Error::dim(format!(
            "{nex} examples, {} labels, batch {batch_size}",
            labels.len()
        )));
    }
    let idx: Vec<usize> = (0..nex).collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size) {
        let bx = gather_rows(images, chunk)?;
        let bl: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let logits = net.forward(&bx, Mode::Eval)?;
        let (loss, _) = softmax_xent(&logits, &bl)?;
        loss_sum += loss * chunk.len() as f64;
        let classes = logits.shape()[1];
        for (b, &want) in bl.iter().enumerate() {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == want {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / nex as f64, correct as f64 / nex as f64))
}

/// Folds every batch-norm layer into the affine layer directly before it and
/// returns the plain network, which computes the same eval-mode function:
/// with `s = scale / sqrt(running_var + eps)` per channel, the weights of
/// the channel scale by `s` and the bias becomes `s * (b - running_mean) +
/// shift`. When a probe batch is given, the eval outputs of the two networks
/// are compared and a residual above `limit` is an error.
pub fn fold_batchnorm(net: &Network, limit: f64, probe: Option<&Tensor>) -> Result<Network> {
    let mut layers: Vec<Layer> = Vec::new();
    for layer in &net.layers {
        match layer {
            Layer::Norm(nl) => {
                let Some(Layer::Affine(prev)) = layers.last_mut() else {
                    return Err(Error::State(format!(
                        "cannot fold {}: it does not follow an affine layer",
                        nl.name
                    )));
                };
                let m = prev.params.fanout;
                if nl.state.channels() != m {
                    return Err(Error::dim(format!(
                        "{} normalizes {} channels, {} has fanout {m}",
                        nl.name,
                        nl.state.channels(),
                        prev.name
                    )));
                }
                let per_unit = prev.params.weights.len() / m;
                let wd = prev.params.weights.data_mut();
                let bd = prev.params.bias.data_mut();
                for j in 0..m {
                    let s = nl.state.scale[j] / (nl.state.running_var[j] + nl.state.epsilon).sqrt();
                    for w in &mut wd[j * per_unit..(j + 1) * per_unit] {
                        *w *= s;
                    }
                    bd[j] = s * (bd[j] - nl.state.running_mean[j]) + nl.state.shift[j];
                }
            }
            Layer::Affine(a) => {
                layers.push(Layer::Affine(AffineLayer::new(
                    a.name.clone(),
                    a.params.clone(),
                )));
            }
            Layer::Act { kind, .. } => layers.push(Layer::act(*kind)),
            Layer::Pool { window, .. } => layers.push(Layer::pool(*window)),
            Layer::Flatten { .. } => layers.push(Layer::flatten()),
        }
    }
    let folded = Network::new(net.input_shape.clone(), layers)?;
    if let Some(p) = probe {
        let mut original = net.clone();
        let mut plain = folded.clone();
        let ya = original.forward(p, Mode::Eval)?;
        let yb = plain.forward(p, Mode::Eval)?;
        let residual = ya.max_abs_diff(&yb);
        if !residual.is_finite() || residual > limit {
            return Err(Error::Fold { residual, limit });
        }
    }
    Ok(folded)
}

/// One batch-size row of the estimation-coupling experiment.
#[derive(Debug, Clone)]
pub struct BiasRow {
    pub batch_size: usize,
    /// Monte Carlo mean of the bias-coordinate update error.
    pub mean: f64,
    pub std_err: f64,
    /// The predicted systematic error `grad_value / batch_size`.
    pub predicted: f64,
}

#[derive(Debug, Clone)]
pub struct BiasReport {
    pub rows: Vec<BiasRow>,
    /// Least-squares slope of `ln mean` against `ln batch_size`.
    pub log_slope: f64,
    pub grad_value: f64,
    pub trials: usize,
    pub decoupled: bool,
}

/// Measures the systematic error that estimating the input mean injects into
/// the bias-coordinate update, for a single unit with one standard normal
/// input and a constant per-example gradient `grad_value`.
///
/// Each trial estimates `mu` from one batch and computes the update on a
/// second batch (a fresh one when `decoupled`, the same one otherwise),
/// through the production update rule with `alpha = beta = 1`. The error is
/// taken against the update under the exact `mu = 0`. Estimating from an
/// independent batch leaves a mean error of `grad_value / batch_size`
/// (the estimator variance times the gradient); sharing the batch cancels
/// the error identically for a constant gradient.
pub fn coupling_bias_experiment(
    batch_sizes: &[usize],
    trials: usize,
    grad_value: f64,
    decoupled: bool,
    seed: u64,
) -> Result<BiasReport> {
    if batch_sizes.is_empty() || batch_sizes.iter().any(|&b| b < 2) {
        return Err(Error::Input("need batch sizes of at least 2".into()));
    }
    if trials < 2 {
        return Err(Error::Input("need at least 2 trials".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exact = ReparamConstants::identity(1, 1);
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &bsz in batch_sizes {
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..trials {
            let est: Vec<f64> = (0..bsz).map(|_| StandardNormal.sample(&mut rng)).collect();
            let upd: Vec<f64> = if decoupled {
                (0..bsz).map(|_| StandardNormal.sample(&mut rng)).collect()
            } else {
                est.clone()
            };
            let m1 = est.iter().sum::<f64>() / bsz as f64;
            let stats = unit_stats(&upd, grad_value)?;
            let estimated = ReparamConstants {
                mu: vec![m1],
                alpha2: vec![1.0],
                beta2: vec![1.0],
            };
            let (_, db_est) = reparam_delta(&stats, &estimated)?;
            let (_, db_exact) = reparam_delta(&stats, &exact)?;
            let d = db_est[0] - db_exact[0];
            sum += d;
            sum2 += d * d;
        }
        let t = trials as f64;
        let mean = sum / t;
        let var = (sum2 / t - mean * mean).max(0.0);
        rows.push(BiasRow {
            batch_size: bsz,
            mean,
            std_err: (var / t).sqrt(),
            predicted: grad_value / bsz as f64,
        });
    }
    let log_slope = if rows.len() >= 2 && rows.iter().all(|r| r.mean > 0.0) {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| ((r.batch_size as f64).ln(), r.mean.ln()))
            .collect();
        let k = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (k * sxy - sx * sy) / (k * sxx - sx * sx)
    } else {
        0.0
    };
    Ok(BiasReport {
        rows,
        log_slope,
        grad_value,
        trials,
        decoupled,
    })
}

/// Batch statistics of a one-input, one-unit layer with constant gradient.
fn unit_stats(x: &[f64], g: f64) -> Result<crate::reparam::BatchStats> {
    let b = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / b;
    let mean_x2 = x.iter().map(|v| v * v).sum::<f64>() / b;
    Ok(crate::reparam::BatchStats {
        mean_x: vec![mean_x],
        mean_x2: vec![mean_x2],
        mean_g: vec![g],
        mean_g2: vec![g * g],
        mean_gx: Tensor::from_vec(&[1, 1], vec![g * mean_x])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ActKind;
    use crate::records::records_to_csv;
    use crate::testutil::assert_close;
    use rand::Rng;

    fn dense_net(rng: &mut ChaCha8Rng, sizes: &[usize], with_bn: bool) -> Network {
        let mut layers = Vec::new();
        for (k, pair) in sizes.windows(2).enumerate() {
            layers.push(Layer::Affine(AffineLayer::new(
                format!("fc{}", k + 1),
                crate::nn::LayerParams::dense(pair[0], pair[1]),
            )));
            if k + 2 < sizes.len() {
                if with_bn {
                    layers.push(Layer::Norm(NormLayer::new(format!("bn{}", k + 1), pair[1])));
                }
                layers.push(Layer::act(ActKind::Relu));
            }
        }
        let mut net = Network::new(vec![sizes[0]], layers).unwrap();
        net.init_params(rng);
        net
    }

    fn toy_data(
        rng: &mut ChaCha8Rng,
        n: usize,
        feat: usize,
        classes: usize,
    ) -> (Tensor, Vec<usize>) {
        let mut x = Tensor::zeros(&[n, feat]);
        let mut labels = Vec::with_capacity(n);
        for b in 0..n {
            let class = rng.gen_range(0..classes);
            for i in 0..feat {
                let noise: f64 = StandardNormal.sample(rng);
                // Class-dependent shift on a rotating feature keeps the
                // problem learnable at every width.
                let shift = if i % classes == class { 1.0 } else { 0.0 };
                x.data_mut()[b * feat + i] = noise + shift;
            }
            labels.push(class);
        }
        (x, labels)
    }

    fn weights(net: &Network, name: &str) -> Vec<f64> {
        for layer in &net.layers {
            if let Layer::Affine(a) = layer {
                if a.name == name {
                    return a.params.weights.data().to_vec();
                }
            }
        }
        panic!("no layer {name}");
    }

    #[test]
    fn sgd_step_matches_the_manual_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut net = dense_net(&mut rng, &[4, 3], false);
        let mut mirror = net.clone();
        let (x, labels) = toy_data(&mut rng, 8, 4, 3);
        let cfg = OptimizerConfig {
            gamma: 0.1,
            ..OptimizerConfig::default()
        };
        let mut state = OptState::new(&net, &cfg);
        step(&mut net, &x, &labels, &cfg, &mut state, 0).unwrap();

        let logits = mirror.forward(&x, Mode::Train).unwrap();
        let (_, grad) = softmax_xent(&logits, &labels).unwrap();
        mirror.backward(&grad).unwrap();
        let Layer::Affine(a) = &mirror.layers[0] else {
            panic!()
        };
        let expect: Vec<f64> = a
            .params
            .weights
            .data()
            .iter()
            .zip(a.grad_w.as_ref().unwrap().data())
            .map(|(w, g)| w - 0.1 * g)
            .collect();
        let got = weights(&net, "fc1");
        for (g, e) in got.iter().zip(&expect) {
            assert_close(*g, *e, 1e-15);
        }
    }

    #[test]
    fn fanin_scaling_rescales_the_sgd_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let net0 = dense_net(&mut rng, &[4, 3], false);
        let (x, labels) = toy_data(&mut rng, 8, 4, 3);
        let w0 = weights(&net0, "fc1");

        let mut runs = Vec::new();
        for algo in [Algorithm::Sgd, Algorithm::SgdFanin] {
            let mut net = net0.clone();
            let cfg = OptimizerConfig {
                algorithm: algo,
                gamma: 0.1,
                ..OptimizerConfig::default()
            };
            let mut state = OptState::new(&net, &cfg);
            step(&mut net, &x, &labels, &cfg, &mut state, 0).unwrap();
            runs.push(weights(&net, "fc1"));
        }
        // fanin 4, sharing 1: the scaled step is exactly half the plain one.
        for ((w, s), f) in w0.iter().zip(&runs[0]).zip(&runs[1]) {
            assert_close(w - f, 0.5 * (w - s), 1e-12);
        }
    }

    #[test]
    fn rmsprop_trajectory_matches_the_shared_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut net = dense_net(&mut rng, &[4, 3], false);
        let mut mirror = net.clone();
        let (x, labels) = toy_data(&mut rng, 8, 4, 3);
        let cfg = OptimizerConfig {
            algorithm: Algorithm::Rmsprop,
            gamma: 0.05,
            lambda_rms: 0.2,
            mu: 1e-6,
            ..OptimizerConfig::default()
        };
        let mut state = OptState::new(&net, &cfg);
        let mut rw = RmsState::new(12, 0.2);
        let mut rb = RmsState::new(3, 0.2);
        for _ in 0..3 {
            step(&mut net, &x, &labels, &cfg, &mut state, 0).unwrap();

            let logits = mirror.forward(&x, Mode::Train).unwrap();
            let (_, grad) = softmax_xent(&logits, &labels).unwrap();
            mirror.backward(&grad).unwrap();
            let Layer::Affine(a) = &mut mirror.layers[0] else {
                panic!()
            };
            let uw = rw
                .rmsprop_step(a.grad_w.as_ref().unwrap().data(), 0.05, 1e-6)
                .unwrap();
            let ub = rb
                .rmsprop_step(a.grad_b.as_ref().unwrap().data(), 0.05, 1e-6)
                .unwrap();
            for (w, u) in a.params.weights.data_mut().iter_mut().zip(&uw) {
                *w += u;
            }
            for (b, u) in a.params.bias.data_mut().iter_mut().zip(&ub) {
                *b += u;
            }
        }
        let got = weights(&net, "fc1");
        let expect = weights(&mirror, "fc1");
        for (g, e) in got.iter().zip(&expect) {
            assert_close(*g, *e, 1e-12);
        }
    }

    // Pins the per-step sequence: batch statistics from the cached backward
    // products, moment update, constants from the updated averages, delta,
    // apply. Two steps so that reordering the moment update and the constant
    // read would show up.
    #[test]
    fn reparam_step_follows_the_pinned_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut net = dense_net(&mut rng, &[4, 3], false);
        let mut mirror = net.clone();
        let cfg = OptimizerConfig {
            algorithm: Algorithm::ReparamCanonical,
            gamma: 0.02,
            lambda_ema: 0.9,
            ..OptimizerConfig::default()
        };
        let mut state = OptState::new(&net, &cfg);
        let mut ms = MomentState::new(4, 3, 0.9);
        for round in 0..2 {
            let (x, labels) = toy_data(&mut rng, 8, 4, 3);
            step(&mut net, &x, &labels, &cfg, &mut state, 0).unwrap();

            let logits = mirror.forward(&x, Mode::Train).unwrap();
            let (_, grad) = softmax_xent(&logits, &labels).unwrap();
            mirror.backward(&grad).unwrap();
            let Layer::Affine(a) = &mut mirror.layers[0] else {
                panic!()
            };
            let stats = stats_from_backward(
                a.x.as_ref().unwrap(),
                a.gy.as_ref().unwrap(),
                a.grad_w.as_ref().unwrap(),
                a.grad_b.as_ref().unwrap(),
                None,
            )
            .unwrap();
            update_moments(&mut ms, &stats).unwrap();
            let consts = canonical_constants(&ms, 1, &cfg.clamp).unwrap();
            let (dw, db) = reparam_delta(&stats, &consts).unwrap();
            for (w, d) in a.params.weights.data_mut().iter_mut().zip(dw.data()) {
                *w -= 0.02 * d;
            }
            for (b, d) in a.params.bias.data_mut().iter_mut().zip(&db) {
                *b -= 0.02 * d;
            }
            let got = weights(&net, "fc1");
            let expect = weights(&mirror, "fc1");
            for (g, e) in got.iter().zip(&expect) {
                assert_close(*g, *e, 1e-14);
            }
            assert!(round < 2);
        }
    }

    #[test]
    fn extra_ops_counts_only_the_reparametrized_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let net0 = dense_net(&mut rng, &[4, 8, 3], false);
        let (x, labels) = toy_data(&mut rng, 12, 4, 3);
        let rs = RunSettings {
            epochs: 2,
            batch_size: 6,
            seed: 5,
            ..RunSettings::default()
        };

        let mut plain = net0.clone();
        let cfg = OptimizerConfig::default();
        let report = run_epochs(&mut plain, &x, &labels, &cfg, &rs).unwrap();
        assert_eq!(report.extra_ops, 0);
        assert_eq!(report.steps, 4);

        let mut reparam = net0.clone();
        let cfg = OptimizerConfig {
            algorithm: Algorithm::ReparamWhitening,
            gamma: 0.02,
            ..OptimizerConfig::default()
        };
        let report = run_epochs(&mut reparam, &x, &labels, &cfg, &rs).unwrap();
        // Per step: 6 * (4 + 8) for fc1 plus 6 * (8 + 3) for fc2.
        assert_eq!(report.extra_ops, 4 * (6 * 12 + 6 * 11));
    }

    #[test]
    fn trailing_partial_batches_are_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut net = dense_net(&mut rng, &[4, 3], false);
        let (x, labels) = toy_data(&mut rng, 10, 4, 3);
        let rs = RunSettings {
            epochs: 2,
            batch_size: 4,
            seed: 1,
            ..RunSettings::default()
        };
        let report = run_epochs(&mut net, &x, &labels, &OptimizerConfig::default(), &rs).unwrap();
        assert_eq!(report.records.len(), 4);
        let steps: Vec<u64> = report.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
        assert_eq!(report.records[2].epoch, 1);
    }

    #[test]
    fn gather_rows_picks_examples_in_order() {
        let t = Tensor::from_vec(&[3, 2], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        let picked = gather_rows(&t, &[2, 0]).unwrap();
        assert_eq!(picked.shape(), &[2, 2]);
        assert_eq!(picked.data(), &[20.0, 21.0, 0.0, 1.0]);
        assert!(gather_rows(&t, &[3]).is_err());
    }

    #[test]
    fn evaluate_reports_loss_and_accuracy() {
        let mut net = Network::new(
            vec![2],
            vec![Layer::Affine(AffineLayer::new(
                "fc1",
                crate::nn::LayerParams::dense(2, 2),
            ))],
        )
        .unwrap();
        if let Layer::Affine(a) = &mut net.layers[0] {
            a.params.weights = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        }
        let x = Tensor::from_vec(&[2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        // First example predicted class 0 and labeled 0; second predicted 1
        // but labeled 0.
        let (loss, acc) = evaluate(&mut net, &x, &[0, 0], 1).unwrap();
        assert_close(acc, 0.5, 1e-15);
        let expect = ((1.0 + (-10.0_f64).exp()).ln() + (1.0 + (10.0_f64).exp()).ln()) / 2.0;
        assert_close(loss, expect, 1e-9);
    }

    #[test]
    fn fold_preserves_the_eval_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut net = dense_net(&mut rng, &[4, 5, 3], true);
        let (x, labels) = toy_data(&mut rng, 24, 4, 3);
        let cfg = OptimizerConfig {
            algorithm: Algorithm::BatchnormSgd,
            gamma: 0.05,
            ..OptimizerConfig::default()
        };
        let rs = RunSettings {
            epochs: 1,
            batch_size: 8,
            seed: 2,
            ..RunSettings::default()
        };
        run_epochs(&mut net, &x, &labels, &cfg, &rs).unwrap();

        let (probe, _) = toy_data(&mut rng, 16, 4, 3);
        let mut folded = fold_batchnorm(&net, 1e-8, Some(&probe)).unwrap();
        assert!(!folded.layers.iter().any(|l| matches!(l, Layer::Norm(_))));
        let ya = net.forward(&probe, Mode::Eval).unwrap();
        let yb = folded.forward(&probe, Mode::Eval).unwrap();
        assert!(ya.max_abs_diff(&yb) <= 1e-8);
    }

    #[test]
    fn fold_requires_a_preceding_affine_layer() {
        let net = Network::new(vec![4], vec![Layer::Norm(NormLayer::new("bn1", 4))]).unwrap();
        match fold_batchnorm(&net, 1e-8, None) {
            Err(Error::State(msg)) => assert!(msg.contains("bn1")),
            other => panic!("expected a state error, got {other:?}"),
        }
    }

    #[test]
    fn mitigation_matches_batchnorm_sgd_until_the_switch() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let net0 = dense_net(&mut rng, &[4, 6, 3], true);
        let (x, labels) = toy_data(&mut rng, 32, 4, 3);
        let rs = RunSettings {
            epochs: 2,
            batch_size: 8,
            seed: 3,
            ..RunSettings::default()
        };

        let mut scheduled = net0.clone();
        let cfg = OptimizerConfig {
            algorithm: Algorithm::MitigationSchedule,
            gamma: 0.05,
            switch_epoch: 1,
            ..OptimizerConfig::default()
        };
        let report = run_epochs(&mut scheduled, &x, &labels, &cfg, &rs).unwrap();

        let mut bn_only = net0.clone();
        let cfg_bn = OptimizerConfig {
            algorithm: Algorithm::BatchnormSgd,
            gamma: 0.05,
            ..OptimizerConfig::default()
        };
        let bn_report = run_epochs(&mut bn_only, &x, &labels, &cfg_bn, &rs).unwrap();

        // Same seed, same schedule: the first epoch is step-identical, then
        // the fold removes every normalizer and whitening takes over.
        for (a, b) in report.records.iter().zip(&bn_report.records).take(4) {
            assert_eq!(a.loss, b.loss);
        }
        assert_ne!(report.records[4].loss, bn_report.records[4].loss);
        assert!(!scheduled.layers.iter().any(|l| matches!(l, Layer::Norm(_))));
        // Records stay a single consistent table across the fold.
        records_to_csv(&report.records).unwrap();
    }

    #[test]
    fn switch_epoch_zero_is_plain_whitening() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let net0 = dense_net(&mut rng, &[4, 6, 3], false);
        let (x, labels) = toy_data(&mut rng, 32, 4, 3);
        let rs = RunSettings {
            epochs: 2,
            batch_size: 8,
            seed: 4,
            ..RunSettings::default()
        };

        assert!(!Algorithm::MitigationSchedule.wants_batchnorm(0));
        let mut scheduled = net0.clone();
        let cfg = OptimizerConfig {
            algorithm: Algorithm::MitigationSchedule,
            gamma: 0.05,
            switch_epoch: 0,
            ..OptimizerConfig::default()
        };
        let report = run_epochs(&mut scheduled, &x, &labels, &cfg, &rs).unwrap();

        let mut white = net0.clone();
        let cfg_w = OptimizerConfig {
            algorithm: Algorithm::ReparamWhitening,
            gamma: 0.05,
            ..OptimizerConfig::default()
        };
        let white_report = run_epochs(&mut white, &x, &labels, &cfg_w, &rs).unwrap();
        for (a, b) in report.records.iter().zip(&white_report.records) {
            assert_eq!(a.loss, b.loss);
        }
    }

    #[test]
    fn exploding_sgd_fails_with_a_structured_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut net = dense_net(&mut rng, &[4, 8, 3], false);
        let (x, labels) = toy_data(&mut rng, 32, 4, 3);
        let cfg = OptimizerConfig {
            gamma: 1e3,
            ..OptimizerConfig::default()
        };
        let rs = RunSettings {
            epochs: 20,
            batch_size: 8,
            ..RunSettings::default()
        };
        match run_epochs(&mut net, &x, &labels, &cfg, &rs) {
            Err(Error::Divergence(d)) => {
                assert!(d.step < 100, "diverged late, step {}", d.step);
                assert_eq!(d.records.len() as u64, d.step);
                assert!(d.records.iter().all(|r| r.loss.is_finite()));
                assert!(!d.reason.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    // Whatever the stepsize does, a run must end in either a clean report or
    // a structured divergence; no record may carry a non-finite loss.
    #[test]
    fn aggressive_runs_never_leak_non_finite_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let net0 = dense_net(&mut rng, &[4, 8, 3], false);
        let (x, labels) = toy_data(&mut rng, 32, 4, 3);
        for gamma in [1e-2, 1.0, 1e2] {
            let mut net = net0.clone();
            let cfg = OptimizerConfig {
                algorithm: Algorithm::ReparamCanonical,
                gamma,
                ..OptimizerConfig::default()
            };
            let rs = RunSettings {
                epochs: 3,
                batch_size: 8,
                seed: 6,
                ..RunSettings::default()
            };
            match run_epochs(&mut net, &x, &labels, &cfg, &rs) {
                Ok(report) => assert!(report.records.iter().all(|r| r.loss.is_finite())),
                Err(Error::Divergence(d)) => {
                    assert!(d.records.iter().all(|r| r.loss.is_finite()))
                }
                Err(e) => panic!("unexpected failure at gamma {gamma}: {e}"),
            }
        }
    }

    #[test]
    fn decoupled_bias_scales_inversely_with_batch_size() {
        let report = coupling_bias_experiment(&[8, 64], 4000, 2.0, true, 77).unwrap();
        for row in &report.rows {
            assert!(
                (row.mean - row.predicted).abs() <= 4.0 * row.std_err,
                "batch {}: mean {} predicted {} se {}",
                row.batch_size,
                row.mean,
                row.predicted,
                row.std_err
            );
        }
        assert!(
            report.log_slope > -1.3 && report.log_slope < -0.7,
            "slope {}",
            report.log_slope
        );
    }

    #[test]
    fn shared_batch_bias_cancels_exactly() {
        let report = coupling_bias_experiment(&[8, 32], 500, 2.0, false, 78).unwrap();
        for row in &report.rows {
            assert_eq!(row.mean, 0.0);
            assert_eq!(row.std_err, 0.0);
        }
    }
}
