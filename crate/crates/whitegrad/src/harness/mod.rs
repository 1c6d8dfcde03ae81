//! The benchmark harness around the library: datasets, architecture
//! strings, run configuration, checkpoints, and the CLI commands.

pub mod arch;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;

pub use arch::{
    build_network, format_architecture, parse_architecture, with_batchnorm, LayerSpec,
    REFERENCE_ARCH,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use cli::{bias_exp_cmd, compare_runs, load_data, train_cmd, train_run, verify_cmd};
pub use config::{apply_overrides, apply_setting, parse_config, RunConfig};
pub use data::{gen_synthetic, load_cifar10, parse_cifar10_bytes, Dataset};
