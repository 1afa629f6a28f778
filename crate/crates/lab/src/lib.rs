//! Experiment runner for `satlab-core`: a flat `section.key = value` config
//! format, one runner per experiment kind, and deterministic CSV/JSON outputs.
//!
//! A run writes into `<out_dir>/<name>-seed<seed>/`:
//! - `config.txt`: the fully resolved config, loadable as-is;
//! - `metrics.csv`: one row per epoch (one per system for convergence sweeps);
//! - `risk_coverage.csv` (selective) or `sweep.csv` (convergence sweeps);
//! - `summary.json`: kind, seed, final metrics, exercised mechanisms and wall clock;
//! - `dataset.csv` when `experiment.write_dataset = true`.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig, Kind};
pub use runner::{execute, run_experiment, RunError, RunReport};
