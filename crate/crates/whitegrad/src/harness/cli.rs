//! The command implementations behind the binary: train, compare, verify,
//! and the bias experiment. Kept in the library so integration tests can
//! drive them directly.

use crate::curvature::{approx_block, motivating_example};
use crate::error::{Error, Result};
use crate::harness::arch::{build_network, parse_architecture, with_batchnorm};
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::config::RunConfig;
use crate::harness::data::{gen_synthetic, load_cifar10, Dataset};
use crate::nn::network::{AffineLayer, NormLayer};
use crate::nn::{ActKind, Layer, LayerParams, Network};
use crate::optim::{
    coupling_bias_experiment, evaluate, fold_batchnorm, run_epochs, Algorithm, OptState,
    OptimizerConfig, RunReport,
};
use crate::records::{final_epoch_loss, write_csv};
use crate::reparam::{
    block_matrix, block_matrix_delta, dense_batch_stats, function_preservation_check,
    reparam_delta, BatchStats, ReparamConstants,
};
use crate::stepsize::{fanin_denominator_estimate, global_trust_step, RmsState};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;

/// Environment variable naming a directory of CIFAR-10 batch files, used
/// when the config says `data = cifar10`.
pub const DATA_ENV: &str = "WHITEGRAD_DATA_DIR";

/// Loads the dataset a config names: `synthetic`, `cifar10` via the data
/// directory environment variable, or a literal path.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match cfg.data.as_str() {
        "synthetic" => gen_synthetic(cfg.seed, cfg.synthetic_n, &[3, 32, 32], 10, cfg.separation)?,
        "cifar10" => {
            let dir = std::env::var(DATA_ENV).map_err(|_| {
                Error::Config(format!(
                    "data = cifar10 needs {DATA_ENV} to point at the batches"
                ))
            })?;
            load_cifar10(Path::new(&dir))?
        }
        path => load_cifar10(Path::new(path))?,
    };
    if cfg.subset > 0 && cfg.subset < ds.len() {
        ds.subset(cfg.subset)
    } else {
        Ok(ds)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub eval_loss: f64,
    pub eval_acc: f64,
}

/// Builds the network for a config and algorithm choice: batch-norm
/// variants get normalizers inserted after every hidden affine layer.
pub fn build_run_network(cfg: &RunConfig, ds: &Dataset) -> Result<Network> {
    let specs = parse_architecture(&cfg.arch)?;
    let specs = if cfg.algorithm.wants_batchnorm(cfg.switch_epoch) {
        with_batchnorm(&specs)
    } else {
        specs
    };
    let mut net = build_network(&specs, &ds.example_shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    net.init_params(&mut rng);
    Ok(net)
}

/// One full training run on an already-loaded dataset.
pub fn train_run(cfg: &RunConfig, ds: &Dataset) -> Result<(Network, TrainOutcome)> {
    let mut net = build_run_network(cfg, ds)?;
    let report = run_epochs(
        &mut net,
        &ds.images,
        &ds.labels,
        &cfg.optimizer(),
        &cfg.run_settings(),
    )?;
    let (eval_loss, eval_acc) = evaluate(&mut net, &ds.images, &ds.labels, cfg.batch_size)?;
    Ok((
        net,
        TrainOutcome {
            report,
            eval_loss,
            eval_acc,
        },
    ))
}

/// Trains one algorithm, writes `train.csv` and a checkpoint under `out`,
/// and prints a one-line summary. A divergence still writes the records
/// gathered so far before the error propagates.
pub fn train_cmd(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let ds = load_data(cfg)?;
    match train_run(cfg, &ds) {
        Ok((net, outcome)) => {
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                write_csv(&dir.join("train.csv"), &outcome.report.records)?;
                save_checkpoint(&dir.join("checkpoint"), &net)?;
            }
            println!(
                "{} steps={} final_loss={:.6} eval_loss={:.6} eval_acc={:.4} extra_ops={}",
                cfg.algorithm,
                outcome.report.steps,
                final_epoch_loss(&outcome.report.records).unwrap_or(f64::NAN),
                outcome.eval_loss,
                outcome.eval_acc,
                outcome.report.extra_ops,
            );
            Ok(())
        }
        Err(Error::Divergence(d)) => {
            if let Some(dir) = out {
                std::fs::create_dir_all(dir)?;
                if !d.records.is_empty() {
                    write_csv(&dir.join("train.csv"), &d.records)?;
                }
            }
            Err(Error::Divergence(d))
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub steps: u64,
    /// Mean train loss over the final epoch; infinite for a diverged run.
    pub final_loss: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    pub extra_ops: usize,
    pub diverged_at: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    /// The best completed row for an algorithm over the stepsize grid.
    pub fn best(&self, algorithm: Algorithm) -> Option<&CompareRow> {
        self.rows
            .iter()
            .filter(|r| r.algorithm == algorithm && r.diverged_at.is_none())
            .min_by(|a, b| a.final_loss.total_cmp(&b.final_loss))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "algorithm,gamma,steps,final_loss,eval_loss,eval_acc,extra_ops,diverged_at\n",
        );
        for r in &self.rows {
            let diverged = r.diverged_at.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.algorithm,
                r.gamma,
                r.steps,
                r.final_loss,
                r.eval_loss,
                r.eval_acc,
                r.extra_ops,
                diverged
            ));
        }
        out
    }
}

/// Trains every configured algorithm at every grid stepsize on the same
/// data with the same seed, so rows differ only in the update rule. A
/// diverged run becomes a row with infinite loss rather than an error.
pub fn compare_runs(cfg: &RunConfig, out: Option<&Path>) -> Result<CompareReport> {
    let ds = load_data(cfg)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::new();
    for &algorithm in &cfg.compare {
        for &gamma in &cfg.gammas {
            let mut rcfg = cfg.clone();
            rcfg.algorithm = algorithm;
            rcfg.gamma = gamma;
            let (row, records) = match train_run(&rcfg, &ds) {
                Ok((_, outcome)) => (
                    CompareRow {
                        algorithm,
                        gamma,
                        steps: outcome.report.steps,
                        final_loss: final_epoch_loss(&outcome.report.records)
                            .unwrap_or(f64::INFINITY),
                        eval_loss: outcome.eval_loss,
                        eval_acc: outcome.eval_acc,
                        extra_ops: outcome.report.extra_ops,
                        diverged_at: None,
                    },
                    outcome.report.records,
                ),
                Err(Error::Divergence(d)) => (
                    CompareRow {
                        algorithm,
                        gamma,
                        steps: d.step,
                        final_loss: f64::INFINITY,
                        eval_loss: f64::INFINITY,
                        eval_acc: 0.0,
                        extra_ops: 0,
                        diverged_at: Some(d.step),
                    },
                    d.records,
                ),
                Err(e) => return Err(e),
            };
            if let Some(dir) = out {
                if !records.is_empty() {
                    write_csv(&dir.join(format!("{algorithm}-{gamma}.csv")), &records)?;
                }
            }
            match row.diverged_at {
                Some(step) => println!("{algorithm} gamma={gamma} diverged at step {step}"),
                None => println!(
                    "{algorithm} gamma={gamma} final_loss={:.6} eval_acc={:.4} extra_ops={}",
                    row.final_loss, row.eval_acc, row.extra_ops
                ),
            }
            rows.push(row);
        }
    }
    let report = CompareReport { rows };
    if let Some(dir) = out {
        std::fs::write(dir.join("compare.csv"), report.to_csv())?;
    }
    Ok(report)
}

/// Runs the coupled-estimation bias measurement with and without batch
/// decoupling, prints one line per batch size, and optionally writes the
/// table as CSV.
pub fn bias_exp_cmd(trials: usize, grad: f64, seed: u64, out: Option<&Path>) -> Result<()> {
    let batches = [8usize, 32, 128, 512];
    let decoupled = coupling_bias_experiment(&batches, trials, grad, true, seed)?;
    let shared = coupling_bias_experiment(&batches, trials, grad, false, seed.wrapping_add(1))?;
    let mut csv = String::from("batch_size,decoupled_mean,decoupled_se,predicted,shared_mean\n");
    for (d, s) in decoupled.rows.iter().zip(&shared.rows) {
        println!(
            "B={:<4} decoupled mean={:+.6e} se={:.2e} predicted={:.6e} shared mean={:+.1e}",
            d.batch_size, d.mean, d.std_err, d.predicted, s.mean
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            d.batch_size, d.mean, d.std_err, d.predicted, s.mean
        ));
    }
    println!(
        "log-log slope {:.4} over {} trials",
        decoupled.log_slope, trials
    );
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("bias.csv"), csv)?;
    }
    Ok(())
}

struct Checks {
    failures: usize,
}

impl Checks {
    fn report(&mut self, name: &str, pass: bool, detail: String) {
        if pass {
            println!("ok   {name}: {detail}");
        } else {
            self.failures += 1;
            println!("FAIL {name}: {detail}");
        }
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = Tensor::zeros(&[n, m]);
    for r in 0..n {
        for c in 0..m {
            let mut acc = 0.0;
            for i in 0..k {
                acc += a.data()[r * k + i] * b.data()[i * m + c];
            }
            out.data_mut()[r * m + c] = acc;
        }
    }
    out
}

fn identity_residual(product: &Tensor) -> f64 {
    let n = product.shape()[0];
    let mut worst = 0.0_f64;
    for r in 0..n {
        for c in 0..n {
            let want = if r == c { 1.0 } else { 0.0 };
            worst = worst.max((product.data()[r * n + c] - want).abs());
        }
    }
    worst
}

fn random_constants(rng: &mut ChaCha8Rng, n: usize, m: usize) -> ReparamConstants {
    ReparamConstants {
        mu: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        alpha2: (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
        beta2: (0..m).map(|_| rng.gen_range(0.5..2.0)).collect(),
    }
}

fn random_stats(rng: &mut ChaCha8Rng, batch: usize, n: usize, m: usize) -> Result<BatchStats> {
    let mut x = Tensor::zeros(&[batch, n]);
    for v in x.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    let mut gy = Tensor::zeros(&[batch, m]);
    for v in gy.data_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v = g / batch as f64;
    }
    dense_batch_stats(&x, &gy)
}

/// The numerical self-checks: exercises every derivation the update rules
/// rest on and prints one verdict line per check. Any failure turns into an
/// error so the process exits non-zero.
pub fn verify_cmd() -> Result<()> {
    let mut checks = Checks { failures: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);

    // The per-unit preconditioner and its claimed inverse multiply to I.
    {
        let c = random_constants(&mut rng, 6, 3);
        let mut worst = 0.0_f64;
        for j in 0..3 {
            let block = block_matrix(&c, j)?;
            let inverse = approx_block(&c, j)?;
            worst = worst.max(identity_residual(&matmul(&block, &inverse.matrix)));
        }
        checks.report(
            "block_inverse",
            worst <= 1e-10,
            format!("max residual {worst:.2e}"),
        );
    }

    // The fused update equals the explicit per-unit matrix multiply.
    {
        let mut worst = 0.0_f64;
        for _ in 0..20 {
            let stats = random_stats(&mut rng, 16, 5, 4)?;
            let c = random_constants(&mut rng, 5, 4);
            let (dw_a, db_a) = reparam_delta(&stats, &c)?;
            let (dw_b, db_b) = block_matrix_delta(&stats, &c)?;
            worst = worst.max(dw_a.max_abs_diff(&dw_b));
            for (a, b) in db_a.iter().zip(&db_b) {
                worst = worst.max((a - b).abs());
            }
        }
        checks.report(
            "cheap_rule",
            worst <= 1e-10,
            format!("max deviation {worst:.2e}"),
        );
    }

    // Dropping the square on the mean in the corner entry must be caught:
    // the mutated block no longer inverts against the approximation.
    {
        let c = random_constants(&mut rng, 6, 1);
        let correct = block_matrix(&c, 0)?;
        let mut mutated = correct.clone();
        let bad_corner: f64 =
            c.beta2[0] * (1.0 + c.alpha2.iter().zip(&c.mu).map(|(a, m)| a * m).sum::<f64>());
        mutated.data_mut()[0] = bad_corner;
        let inverse = approx_block(&c, 0)?;
        let good = identity_residual(&matmul(&correct, &inverse.matrix));
        let bad = identity_residual(&matmul(&mutated, &inverse.matrix));
        checks.report(
            "corner_square",
            good <= 1e-10 && bad > 1e-3,
            format!("residual {good:.2e} with the square, {bad:.2e} without"),
        );
    }

    // The two-parameter example: curvature-scaled step at (3, 3).
    {
        let ex = motivating_example();
        let dir = ex.newton_direction(&[3.0, 3.0]);
        let step = ex.newton_step(&[3.0, 3.0], 0.03);
        let pass = (-102.0..=-100.0).contains(&dir[1])
            && (step[0] - 2.9).abs() <= 0.05
            && step[1].abs() <= 0.05;
        checks.report(
            "curvature_example",
            pass,
            format!(
                "direction ({:.3}, {:.3}), step ({:.4}, {:.4})",
                dir[0], dir[1], step[0], step[1]
            ),
        );
    }

    // The pinned trust-region example: gradient (3, 4), unit metric, eta 1.
    {
        let step = global_trust_step(&[3.0, 4.0], &[3.0, 4.0], 1.0)?;
        let pass = (step[0] - 0.6).abs() <= 1e-12 && (step[1] - 0.8).abs() <= 1e-12;
        checks.report(
            "trust_step",
            pass,
            format!("step ({}, {})", step[0], step[1]),
        );
    }

    // The trust step has length eta in the metric it was computed under.
    {
        let g = [[2.0, 0.5], [0.5, 1.0]];
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        let grad = [0.7, -1.3];
        let ginv_grad = [
            (g[1][1] * grad[0] - g[0][1] * grad[1]) / det,
            (g[0][0] * grad[1] - g[1][0] * grad[0]) / det,
        ];
        let eta = 0.25;
        let step = global_trust_step(&grad, &ginv_grad, eta)?;
        let quad = g[0][0] * step[0] * step[0]
            + 2.0 * g[0][1] * step[0] * step[1]
            + g[1][1] * step[1] * step[1];
        let err = (quad.sqrt() - eta).abs();
        checks.report(
            "metric_norm",
            err <= 1e-12,
            format!("norm deviation {err:.2e}"),
        );
    }

    // The implied-fanin estimator: sqrt(n) for independent inputs, n for
    // perfectly correlated ones.
    {
        let (batch, n) = (4000, 64);
        let mut x = Tensor::zeros(&[batch, n]);
        for v in x.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let g: Vec<f64> = (0..batch)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let iid = fanin_denominator_estimate(&x, &g)?;

        let mut xc = Tensor::zeros(&[batch, 4]);
        for b in 0..batch {
            let z: f64 = StandardNormal.sample(&mut rng);
            for i in 0..4 {
                xc.data_mut()[b * 4 + i] = z;
            }
        }
        let gc: Vec<f64> = (0..batch)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let correlated = fanin_denominator_estimate(&xc, &gc)?;
        let pass = (iid - 8.0).abs() / 8.0 <= 0.1 && (correlated - 4.0).abs() / 4.0 <= 0.1;
        checks.report(
            "fanin_estimator",
            pass,
            format!("independent {iid:.2} (want 8), correlated {correlated:.2} (want 4)"),
        );
    }

    // RMSProp in one recurrence: blend the squared gradient, then divide.
    {
        let mut state = RmsState::new(1, 0.1);
        let mut r = 0.0;
        let mut worst = 0.0_f64;
        for _ in 0..200 {
            let g: f64 = StandardNormal.sample(&mut rng);
            let got = state.rmsprop_step(&[g], 0.01, 1e-8)?;
            r = 0.9 * r + 0.1 * g * g;
            let want = -0.01 * g / (1e-8 + r).sqrt();
            worst = worst.max((got[0] - want).abs());
        }
        checks.report(
            "rmsprop_rule",
            worst <= 1e-12,
            format!("max deviation {worst:.2e}"),
        );
    }

    // The reparametrization leaves the layer function untouched.
    {
        let mut params = LayerParams::dense(5, 3);
        for v in params
            .weights
            .data_mut()
            .iter_mut()
            .chain(params.bias.data_mut())
        {
            *v = StandardNormal.sample(&mut rng);
        }
        let c = random_constants(&mut rng, 5, 3);
        let mut x = Tensor::zeros(&[12, 5]);
        for v in x.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let drift = function_preservation_check(&params, &c, &x)?;
        checks.report(
            "function_preservation",
            drift <= 1e-12,
            format!("max drift {drift:.2e}"),
        );
    }

    // Folding batch-norm away reproduces the eval-mode function.
    {
        let mut net = Network::new(
            vec![6],
            vec![
                Layer::Affine(AffineLayer::new("fc1", LayerParams::dense(6, 8))),
                Layer::Norm(NormLayer::new("bn1", 8)),
                Layer::act(ActKind::Relu),
                Layer::Affine(AffineLayer::new("fc2", LayerParams::dense(8, 4))),
            ],
        )?;
        net.init_params(&mut rng);
        let mut x = Tensor::zeros(&[32, 6]);
        for v in x.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let labels: Vec<usize> = (0..32).map(|_| rng.gen_range(0..4)).collect();
        let cfg = OptimizerConfig {
            algorithm: Algorithm::BatchnormSgd,
            gamma: 0.05,
            ..OptimizerConfig::default()
        };
        let mut state = OptState::new(&net, &cfg);
        for _ in 0..3 {
            crate::optim::step(&mut net, &x, &labels, &cfg, &mut state, 0)?;
        }
        let folded = fold_batchnorm(&net, 1e-8, Some(&x))?;
        let mut a = net.clone();
        let mut b = folded;
        let residual = a
            .forward(&x, crate::nn::Mode::Eval)?
            .max_abs_diff(&b.forward(&x, crate::nn::Mode::Eval)?);
        checks.report(
            "batchnorm_fold",
            residual <= 1e-8,
            format!("residual {residual:.2e}"),
        );
    }

    if checks.failures > 0 {
        Err(Error::Numeric(format!(
            "{} verification checks failed",
            checks.failures
        )))
    } else {
        println!("all checks passed");
        Ok(())
    }
}

/// A small, fast run setup for smoke tests and examples.
pub fn smoke_config() -> RunConfig {
    RunConfig {
        arch: "C4(3x3)-P(2x2)-F16-F10".to_string(),
        synthetic_n: 192,
        epochs: 1,
        batch_size: 32,
        gamma: 0.05,
        gammas: vec![0.05],
        ..RunConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::apply_setting;

    #[test]
    fn verify_checks_all_pass() {
        verify_cmd().unwrap();
    }

    #[test]
    fn train_cmd_writes_records_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config();
        train_cmd(&cfg, Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
        assert!(csv.starts_with("step,epoch,loss,wall_ms"));
        assert_eq!(csv.lines().count(), 1 + 192 / 32);
        assert!(dir.path().join("checkpoint/manifest.json").is_file());
        assert!(dir.path().join("checkpoint/arrays.bin").is_file());
    }

    #[test]
    fn train_output_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = smoke_config();
        train_cmd(&cfg, Some(a.path())).unwrap();
        train_cmd(&cfg, Some(b.path())).unwrap();
        let ca = std::fs::read(a.path().join("train.csv")).unwrap();
        let cb = std::fs::read(b.path().join("train.csv")).unwrap();
        assert_eq!(ca, cb);
        let ka = std::fs::read(a.path().join("checkpoint/arrays.bin")).unwrap();
        let kb = std::fs::read(b.path().join("checkpoint/arrays.bin")).unwrap();
        assert_eq!(ka, kb);
    }

    #[test]
    fn compare_runs_cover_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke_config();
        apply_setting(&mut cfg, "compare", "sgd,reparam_whitening").unwrap();
        apply_setting(&mut cfg, "gammas", "0.02,0.1").unwrap();
        let report = compare_runs(&cfg, Some(dir.path())).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.best(Algorithm::Sgd).is_some());
        let csv = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(dir.path().join("sgd-0.02.csv").is_file());
        assert!(dir.path().join("reparam_whitening-0.1.csv").is_file());
    }

    #[test]
    fn bias_exp_writes_the_table() {
        let dir = tempfile::tempdir().unwrap();
        bias_exp_cmd(300, 1.0, 9, Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("bias.csv")).unwrap();
        assert!(csv.starts_with("batch_size,"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn synthetic_subset_loading_respects_the_config() {
        let mut cfg = smoke_config();
        apply_setting(&mut cfg, "subset", "64").unwrap();
        let ds = load_data(&cfg).unwrap();
        assert_eq!(ds.len(), 64);
    }
}
