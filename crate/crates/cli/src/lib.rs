//! Command implementations behind the `sislink` binary, kept in a library so
//! tests can drive them without spawning processes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod commands;
pub mod config_file;
pub mod error;

pub use calibrate::{calibrate, cmd_calibrate, CalibrateOptions, CalibrationProbe, CalibrationReport};
pub use commands::{cmd_evaluate, cmd_gradcheck, cmd_heatmap, cmd_sweep, cmd_train, RunMetrics};
pub use config_file::{default_config_text, load_config, resolve_output_dir, OUTPUT_DIR_ENV};
pub use error::CliError;
