//! Run configuration: `key = value` files plus command-line overrides.

use crate::error::{Error, Result};
use crate::harness::arch::{parse_architecture, REFERENCE_ARCH};
use crate::optim::{Algorithm, OptimizerConfig, RunSettings};

/// Everything a training or comparison run needs. Defaults are usable as-is
/// on synthetic data; a config file and `--set` overrides adjust fields by
/// name.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Architecture string; see the arch module for the grammar.
    pub arch: String,
    /// `synthetic`, `cifar10` (resolved via the data-dir environment
    /// variable), or a path to CIFAR-10 binary data.
    pub data: String,
    /// Number of synthetic examples when `data = synthetic`.
    pub synthetic_n: usize,
    /// Class separation in noise sigmas when `data = synthetic`.
    pub separation: f64,
    /// Use only the first `subset` examples; 0 means all.
    pub subset: usize,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub gamma: f64,
    /// Comma-separated stepsize grid for comparison runs.
    pub gammas: Vec<f64>,
    /// Comma-separated algorithm list for comparison runs.
    pub compare: Vec<Algorithm>,
    pub lambda_ema: f64,
    pub lambda_rms: f64,
    pub mu: f64,
    pub switch_epoch: u64,
    pub batch_constants: bool,
    pub divergence_limit: f64,
    /// Record wall-clock time per step; off keeps output byte-reproducible.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            algorithm: Algorithm::Sgd,
            arch: REFERENCE_ARCH.to_string(),
            data: "synthetic".to_string(),
            synthetic_n: 5000,
            separation: 3.0,
            subset: 0,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            gamma: 0.05,
            gammas: vec![0.05, 0.5],
            compare: vec![
                Algorithm::Sgd,
                Algorithm::SgdFanin,
                Algorithm::Rmsprop,
                Algorithm::ReparamCanonical,
                Algorithm::ReparamWhitening,
                Algorithm::BatchnormSgd,
            ],
            lambda_ema: 0.95,
            lambda_rms: 0.1,
            mu: 1e-8,
            switch_epoch: 2,
            batch_constants: false,
            divergence_limit: 1e8,
            timing: false,
        }
    }
}

impl RunConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            algorithm: self.algorithm,
            gamma: self.gamma,
            lambda_ema: self.lambda_ema,
            lambda_rms: self.lambda_rms,
            mu: self.mu,
            clamp: Default::default(),
            switch_epoch: self.switch_epoch,
            batch_constants: self.batch_constants,
            divergence_limit: self.divergence_limit,
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            timing: self.timing,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value '{value}' for {key}, want true or false"
        ))),
    }
}

/// Applies one `key = value` setting by name. Unknown keys are errors so
/// that typos fail loudly.
pub fn apply_setting(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let value = value.trim();
    match key.trim() {
        "algorithm" => cfg.algorithm = value.parse()?,
        "arch" => {
            parse_architecture(value)?;
            cfg.arch = value.to_string();
        }
        "data" => cfg.data = value.to_string(),
        "synthetic_n" => cfg.synthetic_n = parse_value("synthetic_n", value)?,
        "separation" => cfg.separation = parse_value("separation", value)?,
        "subset" => cfg.subset = parse_value("subset", value)?,
        "epochs" => cfg.epochs = parse_value("epochs", value)?,
        "batch_size" => cfg.batch_size = parse_value("batch_size", value)?,
        "seed" => cfg.seed = parse_value("seed", value)?,
        "gamma" => cfg.gamma = parse_value("gamma", value)?,
        "gammas" => {
            let mut grid = Vec::new();
            for part in value.split(',') {
                grid.push(parse_value::<f64>("gammas", part.trim())?);
            }
            if grid.is_empty() {
                return Err(Error::Config("gammas needs at least one value".into()));
            }
            cfg.gammas = grid;
        }
        "compare" => {
            let mut algos = Vec::new();
            for part in value.split(',') {
                algos.push(part.trim().parse::<Algorithm>()?);
            }
            cfg.compare = algos;
        }
        "lambda_ema" => cfg.lambda_ema = parse_value("lambda_ema", value)?,
        "lambda_rms" => cfg.lambda_rms = parse_value("lambda_rms", value)?,
        "mu" => cfg.mu = parse_value("mu", value)?,
        "switch_epoch" => cfg.switch_epoch = parse_value("switch_epoch", value)?,
        "batch_constants" => cfg.batch_constants = parse_bool("batch_constants", value)?,
        "divergence_limit" => cfg.divergence_limit = parse_value("divergence_limit", value)?,
        "timing" => cfg.timing = parse_bool("timing", value)?,
        other => return Err(Error::Config(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

/// Parses a config file: one `key = value` per line, `#` starts a comment,
/// blank lines are skipped.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        apply_setting(&mut cfg, key, value)
            .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
    }
    Ok(cfg)
}

/// Applies `--set key=value` overrides on top of a parsed config.
pub fn apply_overrides(cfg: &mut RunConfig, sets: &[String]) -> Result<()> {
    for s in sets {
        let Some((key, value)) = s.split_once('=') else {
            return Err(Error::Config(format!("--set '{s}' is not key=value")));
        };
        apply_setting(cfg, key, value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults_and_ignores_comments() {
        let text = "\
# comparison setup
algorithm = reparam_whitening
epochs = 3   # short run
gamma = 0.2
gammas = 0.1, 0.3
compare = sgd, sgd_fanin
batch_constants = true

arch = F20-F10
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.algorithm, Algorithm::ReparamWhitening);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.gamma, 0.2);
        assert_eq!(cfg.gammas, vec![0.1, 0.3]);
        assert_eq!(cfg.compare, vec![Algorithm::Sgd, Algorithm::SgdFanin]);
        assert!(cfg.batch_constants);
        assert_eq!(cfg.arch, "F20-F10");
        // Untouched keys keep their defaults.
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail_loudly() {
        assert!(parse_config("gama = 0.1").is_err());
        assert!(parse_config("gamma = fast").is_err());
        assert!(parse_config("algorithm = adam").is_err());
        assert!(parse_config("arch = Q5").is_err());
        assert!(parse_config("timing = yes").is_err());
        assert!(parse_config("gamma 0.1").is_err());
    }

    #[test]
    fn set_overrides_apply_in_order() {
        let mut cfg = RunConfig::default();
        apply_overrides(
            &mut cfg,
            &[
                "seed=7".to_string(),
                "gamma=0.5".to_string(),
                "gamma=0.25".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.gamma, 0.25);
        assert!(apply_overrides(&mut cfg, &["gamma".to_string()]).is_err());
    }

    #[test]
    fn optimizer_view_carries_the_fields_over() {
        let mut cfg = RunConfig::default();
        apply_setting(&mut cfg, "algorithm", "rmsprop").unwrap();
        apply_setting(&mut cfg, "lambda_rms", "0.3").unwrap();
        let opt = cfg.optimizer();
        assert_eq!(opt.algorithm, Algorithm::Rmsprop);
        assert_eq!(opt.lambda_rms, 0.3);
        let rs = cfg.run_settings();
        assert_eq!(rs.batch_size, 64);
        assert!(!rs.timing);
    }
}
